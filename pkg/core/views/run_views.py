from rest_framework.decorators import api_view
from rest_framework.response import Response
from rest_framework import status
from django.core.paginator import Paginator
from django.db.models import Q
from ..models import TrainingRun
from ..serializers import TrainingRunSerializer
from ..services.run_service import RunDirectory


@api_view(['GET'])
def run_list(request):
    """List run records with subcommand / status filters, search and pagination"""
    try:
        search = request.GET.get('search', '').strip()
        subcommand = request.GET.get('subcommand')
        run_status = request.GET.get('status')
        page = int(request.GET.get('page', 1))
        page_size = int(request.GET.get('page_size', 10))

        queryset = TrainingRun.objects.all()
        if subcommand:
            queryset = queryset.filter(subcommand=subcommand)
        if run_status:
            queryset = queryset.filter(status=run_status)
        if search:
            queryset = queryset.filter(
                Q(run_dir__icontains=search) | Q(config_hash__startswith=search)
            )
        queryset = queryset.order_by('-created_at')

        paginator = Paginator(queryset, page_size)
        total_pages = paginator.num_pages
        page = min(max(page, 1), total_pages)
        page_obj = paginator.get_page(page)

        serializer = TrainingRunSerializer(page_obj.object_list, many=True)
        return Response({
            'data': serializer.data,
            'count': paginator.count,
            'page': page,
            'page_size': page_size,
            'total_pages': total_pages
        }, status=status.HTTP_200_OK)

    except ValueError as e:
        return Response({'error': str(e)}, status=status.HTTP_400_BAD_REQUEST)


@api_view(['GET'])
def run_detail(request, id):
    try:
        run = TrainingRun.objects.get(id=id)
    except TrainingRun.DoesNotExist:
        return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)
    return Response(TrainingRunSerializer(run).data, status=status.HTTP_200_OK)


@api_view(['GET'])
def run_metrics(request, id):
    """Rows of the run's metrics.csv (optionally only the last `tail` rows)"""
    try:
        run = TrainingRun.objects.get(id=id)
    except TrainingRun.DoesNotExist:
        return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)

    frame = RunDirectory(run.run_dir).read_rows('metrics')
    tail = request.GET.get('tail')
    if tail:
        try:
            frame = frame.tail(int(tail))
        except ValueError:
            return Response({'error': 'tail must be an integer'}, status=status.HTTP_400_BAD_REQUEST)
    return Response({
        'columns': list(frame.columns),
        'rows': frame.astype(object).where(frame.notna(), None).to_dict(orient='records'),
        'count': len(frame),
    }, status=status.HTTP_200_OK)
