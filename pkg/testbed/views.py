"""
Read-only API views over stored experiment runs
"""
from rest_framework import status
from rest_framework.decorators import api_view, permission_classes
from rest_framework.pagination import PageNumberPagination
from rest_framework.permissions import AllowAny
from rest_framework.response import Response
import logging

from .models import ExperimentRun, ModelSnapshotRecord
from .serializers import (
    ExperimentRunSerializer, ExperimentRunDetailSerializer, ModelSnapshotSerializer
)

logger = logging.getLogger(__name__)

EXPERIMENTS = {'A', 'B', 'C'}


@api_view(['GET'])
@permission_classes([AllowAny])
def health_check(request):
    """Health check endpoint"""
    return Response({
        'status': 'healthy',
        'message': 'Twinbed API is running',
        'runs': ExperimentRun.objects.count(),
    })


@api_view(['GET'])
@permission_classes([AllowAny])
def list_runs(request):
    """List stored runs, newest first; ?experiment=A|B|C filters"""
    runs = ExperimentRun.objects.all()
    experiment = request.query_params.get('experiment')
    if experiment:
        experiment = experiment.upper()
        if experiment not in EXPERIMENTS:
            return Response({
                'error': f"Unknown experiment '{experiment}'",
                'allowed': sorted(EXPERIMENTS),
            }, status=status.HTTP_400_BAD_REQUEST)
        runs = runs.filter(experiment=experiment)

    paginator = PageNumberPagination()
    page = paginator.paginate_queryset(runs, request)
    return paginator.get_paginated_response(ExperimentRunSerializer(page, many=True).data)


@api_view(['GET'])
@permission_classes([AllowAny])
def run_detail(request, run_id):
    """One run with the snapshots it used"""
    try:
        run = ExperimentRun.objects.prefetch_related('snapshots').get(pk=run_id)
    except ExperimentRun.DoesNotExist:
        logger.info(f"Run {run_id} requested but not found")
        return Response({'error': f'Run {run_id} not found'}, status=status.HTTP_404_NOT_FOUND)
    return Response(ExperimentRunDetailSerializer(run).data)


@api_view(['GET'])
@permission_classes([AllowAny])
def snapshot_detail(request, snapshot_id):
    """A stored model snapshot with its coefficients"""
    try:
        snapshot = ModelSnapshotRecord.objects.get(pk=snapshot_id)
    except ModelSnapshotRecord.DoesNotExist:
        return Response({'error': f'Snapshot {snapshot_id} not found'}, status=status.HTTP_404_NOT_FOUND)
    return Response(ModelSnapshotSerializer(snapshot).data)
