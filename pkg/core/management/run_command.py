"""
Shared base for the subcommand management commands.

Usage:
    python manage.py <subcommand> [--config FILE] [--set key=value ...] [--seed N] [--resume] [--run-dir DIR]

Phase-specific flags (--steps, --from, ...) are translated into config
overrides that sit below the explicit --set items.
"""

import logging
from django.core.management.base import BaseCommand, CommandError

from core.services import run_service

logger = logging.getLogger(__name__)


class RunCommand(BaseCommand):
    subcommand = None
    # option dest -> config key
    flag_keys = {}

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Run config file (key = value lines)')
        parser.add_argument(
            '--set',
            dest='overrides',
            action='append',
            default=[],
            metavar='KEY=VALUE',
            help='Override one config key; repeatable',
        )
        parser.add_argument('--seed', type=int, help='Master seed (overrides the config)')
        parser.add_argument('--resume', action='store_true', help='Continue in an existing run directory')
        parser.add_argument('--run-dir', dest='run_dir', help='Run directory (default: <runs root>/<subcommand>-<hash>)')
        self.add_phase_arguments(parser)

    def add_phase_arguments(self, parser):
        pass

    def get_subcommand(self, options):
        return self.subcommand

    def phase_overrides(self, options):
        items = [f'{key}={options[dest]}' for dest, key in self.flag_keys.items() if options.get(dest) is not None]
        if options.get('run_dir'):
            items.append(f"run_dir={options['run_dir']}")
        return items

    def handle(self, *args, **options):
        subcommand = self.get_subcommand(options)
        overrides = self.phase_overrides(options) + list(options['overrides'])

        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(self.style.NOTICE(f'DINOLAB {subcommand.upper()}'))
        self.stdout.write(self.style.NOTICE('=' * 60))
        if options['resume']:
            self.stdout.write(self.style.WARNING('Resuming from the latest checkpoint in the run directory'))

        result = run_service.run(
            subcommand,
            config_path=options.get('config'),
            overrides=overrides,
            seed=options.get('seed'),
            resume=options['resume'],
        )
        if result.run_dir is not None:
            self.stdout.write(f'Run directory: {result.run_dir}')
        if not result.ok:
            raise CommandError(result.error, returncode=result.exit_code)

        self.report(result)
        self.stdout.write(self.style.SUCCESS(f'{subcommand} completed'))
        return None

    def report(self, result):
        for key, value in sorted((result.summary or {}).items()):
            if isinstance(value, dict) or (isinstance(value, str) and '\n' in value):
                continue
            self.stdout.write(f'  {key}: {value}')
