from rest_framework import pagination
from rest_framework.response import Response


class PaginationWithTotalPage(pagination.PageNumberPagination):
    """Page size comes from REST_FRAMEWORK['PAGE_SIZE'], clients may ask for up to max_page_size rows"""
    page_size_query_param = 'page_size'
    max_page_size = 1000

    def get_paginated_response(self, data):
        paginator = self.page.paginator
        return Response({
            'next': self.get_next_link(),
            'previous': self.get_previous_link(),
            'count': paginator.count,
            'page': self.page.number,
            'total_pages': paginator.num_pages,
            'results': data,
        })

    def get_paginated_response_schema(self, schema):
        response_schema = super().get_paginated_response_schema(schema)
        response_schema['properties']['page'] = {'type': 'integer', 'example': 1}
        response_schema['properties']['total_pages'] = {'type': 'integer', 'example': 1}
        return response_schema
