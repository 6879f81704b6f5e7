"""
Curation Command

Usage:
    python manage.py curate --source pixels --size 128
    python manage.py curate --source checkpoint --from CHECKPOINT

Hierarchical k-means over the dataset embeddings, then balanced sampling;
writes curated_index.txt for the `curated_index` config key of a training run.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Hierarchical k-means curation with balanced sampling'
    subcommand = 'curate'
    flag_keys = {'source': 'curate_source', 'size': 'curate_size', 'from_checkpoint': 'from_checkpoint'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--source', choices=['pixels', 'checkpoint'], help='Embedding source')
        parser.add_argument('--size', type=int, help='Number of images to keep')
        parser.add_argument('--from', dest='from_checkpoint', help='Checkpoint (with --source checkpoint)')
