"""
Gradient Check Command

Usage:
    python manage.py gradcheck [--case matmul --case composite_loss] [--rtol 1e-4]

Compares analytic gradients of every differentiable operation, the
attention strategies, the projection head and the composite training loss
against central finite differences at float64.
Exits 3 when any case fails.
"""

import logging
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import NumericFault
from core.services.gradcheck_service import DEFAULT_RTOL, all_cases, run_checks

logger = logging.getLogger(__name__)

COMPOSITE_RTOL = 1e-3


class Command(BaseCommand):
    help = 'Finite-difference gradient checks of the autodiff operations and the training loss'

    def add_arguments(self, parser):
        parser.add_argument(
            '--case',
            dest='cases',
            action='append',
            default=[],
            help='Check only this case; repeatable (default: all)',
        )
        parser.add_argument('--seed', type=int, default=0, help='Seed for the random test inputs')
        parser.add_argument('--rtol', type=float, default=DEFAULT_RTOL, help='Per-operation relative tolerance')
        parser.add_argument('--list', action='store_true', help='List the case names and exit')

    def handle(self, *args, **options):
        if options['list']:
            for name in all_cases(options['seed']):
                self.stdout.write(name)
            return

        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(self.style.NOTICE('GRADIENT CHECK'))
        self.stdout.write(self.style.NOTICE('=' * 60))

        names = options['cases'] or list(all_cases(options['seed']))
        try:
            op_names = [n for n in names if n != 'composite_loss']
            results = run_checks(op_names, seed=options['seed'], rtol=options['rtol']) if op_names else []
            if 'composite_loss' in names:
                results += run_checks(['composite_loss'], seed=options['seed'], rtol=COMPOSITE_RTOL)
        except KeyError as exc:
            raise CommandError(str(exc), returncode=2)

        failed = []
        for result in results:
            if result.passed:
                self.stdout.write(f'  {result.name:<28} ok    worst rel. error {result.worst_error:.2e}')
            else:
                failed.append(result.name)
                self.stdout.write(self.style.ERROR(f'  {result.name:<28} FAIL  {result.error}'))

        self.stdout.write('')
        if failed:
            raise CommandError(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}",
                               returncode=NumericFault.exit_code)
        self.stdout.write(self.style.SUCCESS(f'All {len(results)} gradient checks passed'))
