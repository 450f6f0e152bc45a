class SimpleEnum:
    """
        String constants declared as UPPER_CASE class attributes.

        A label other than the attribute name is declared through a private attribute, e.g.
        ``__RHO_FULL = 'full change of variables'``.
    """

    @classmethod
    def _members(cls):
        for klass in reversed(cls.__mro__):
            for att, value in vars(klass).items():
                if att.isupper() and isinstance(value, str):
                    yield klass, att, value

    @classmethod
    def get_display_name(cls, att_name):
        for klass in cls.__mro__:
            label = vars(klass).get(f'_{klass.__name__}__{att_name}')
            if label:
                return label
        return att_name.replace('_', ' ').lower()

    @classmethod
    def choices(cls):
        """Pairs (value, label) for model fields and filters"""
        return [(value, cls.get_display_name(att)) for _, att, value in cls._members()]

    @classmethod
    def values(cls):
        return [value for _, _, value in cls._members()]

    @classmethod
    def check(cls, value, what):
        """Return value if it is a member, raise ValueError naming the accepted values otherwise"""
        accepted = cls.values()
        if value not in accepted:
            raise ValueError(f'unknown {what} {value!r}, expected one of {", ".join(accepted)}')
        return value
