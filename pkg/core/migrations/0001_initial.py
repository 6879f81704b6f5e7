# Generated by Django 6.0.1 on 2026-10-19 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(primary_key=True, serialize=False)),
                ('subcommand', models.CharField(choices=[('pretrain', 'Pre-train'), ('refine', 'Gram refinement'), ('hires-adapt', 'High-resolution adaptation'), ('distill', 'Distillation'), ('curate', 'Curation'), ('probe', 'Probes'), ('diagnose', 'Diagnostics'), ('simulate-distill', 'Distillation plan')], max_length=20)),
                ('run_dir', models.CharField(max_length=500, unique=True)),
                ('config_hash', models.CharField(max_length=64)),
                ('seed', models.BigIntegerField(default=0)),
                ('start_step', models.BigIntegerField(default=0)),
                ('end_step', models.BigIntegerField(default=0)),
                ('parent_checkpoint', models.CharField(blank=True, default='', max_length=500)),
                ('gram_checkpoint', models.CharField(blank=True, default='', max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('exit_code', models.IntegerField(default=0)),
                ('error', models.TextField(blank=True, default='')),
                ('artifact_versions', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('parent', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='children', to='core.trainingrun')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
