from common_bases.enums import SimpleEnum


class BoundaryKind(SimpleEnum):
    AFFINE_PLANE = 'affine_plane'
    LIPSCHITZ_GRAPH = 'lipschitz_graph'
    CANTOR = 'cantor'


class OperatorKind(SimpleEnum):
    MODEL = 'model'
    DISTANCE = 'distance'
    L_ALPHA = 'l_alpha'
    LIFT = 'lift'
    CONJUGATED = 'conjugated'


class WeightMode(SimpleEnum):
    EUCLIDEAN = 'euclidean'
    D_ALPHA = 'd_alpha'


class CovVariant(SimpleEnum):
    IDENTITY = 'identity'
    RHO1 = 'rho1'
    RHO2 = 'rho2'
    RHO_FULL = 'rho_full'


class SolverMethod(SimpleEnum):
    AUTO = 'auto'
    DIRECT = 'direct'
    ITERATIVE = 'iterative'


class RunStatus(SimpleEnum):
    PASSED = 'passed'
    FAILED = 'failed'
    ERROR = 'error'
