"""
Django settings for the dinolab project.

Holds the run-config defaults every management command starts from
(DINOLAB_DEFAULTS), where run directories live, and logging.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Quick-start development settings - unsuitable for production
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'django-insecure-dinolab-local-runs-only')

DEBUG = os.environ.get('DJANGO_DEBUG', '1') == '1'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'rest_framework',
    'core'
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [
        'rest_framework.authentication.SessionAuthentication',
    ],
    'DEFAULT_PERMISSION_CLASSES': [
        'rest_framework.permissions.AllowAny',
    ],
}

ROOT_URLCONF = 'dinolab.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'dinolab.wsgi.application'


# Database

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (admin only)

STATIC_URL = 'static/'
STATIC_ROOT = os.path.join(BASE_DIR, 'staticfiles')

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'core': {
            'handlers': ['console'],
            'level': os.environ.get('DINOLAB_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
        'dinolab': {
            'handlers': ['console'],
            'level': os.environ.get('DINOLAB_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}


# Runs

# Every run directory (manifest, config copy, metrics, checkpoints, images) lives under here
DINOLAB_RUNS_ROOT = Path(os.environ.get('DINOLAB_RUNS_ROOT', BASE_DIR / 'runs'))

# Only environment knob that touches computation; manage.py exports it to BLAS before numpy loads
DINOLAB_NUM_THREADS = int(os.environ.get('DINOLAB_NUM_THREADS', '1'))

# Accepted run-config keys and their defaults (file < --set overrides < --seed).
# Step counts of 0 mean "full-scale value divided by `scale`"; -1 means "derive".
DINOLAB_DEFAULTS = {
    # run
    'seed': 0,
    'scale': 100,
    'steps': 200,
    'checkpoint_every': 50,
    'log_every': 10,
    'from_checkpoint': '',
    'gram_checkpoint': '',
    'run_dir': '',

    # data
    'dataset_size': 512,
    'image_size': 64,
    'batch_size': 8,
    'p_homogeneous': 0.1,
    'homogeneous_part': 'curated',
    'curated_index': '',
    'part_weights': '',

    # backbone
    'depth': 4,
    'embed_dim': 64,
    'ffn_hidden_dim': 128,
    'head_count': 4,
    'head_dim': 16,
    'patch_size': 8,
    'register_count': 4,
    'rope_jitter_min': 0.5,
    'rope_jitter_max': 2.0,
    'outlier_strategy': 'registers',
    'stochastic_depth_rate': 0.0,
    'separate_output_norms': True,

    # heads
    'head_hidden_dim': 256,
    'head_bottleneck_dim': 64,
    'prototype_count': 128,
    'head_layers': 3,

    # losses
    'student_temp': 0.1,
    'teacher_temp_start': 0.04,
    'teacher_temp_end': 0.07,
    'sinkhorn_iters': 3,
    'koleo_group_size': 16,
    'w_dino': 1.0,
    'w_ibot': 1.0,
    'w_koleo': 0.1,
    'w_gram': 2.0,

    # optimizer and schedules
    'base_lr': 4e-4,
    'warmup_steps': -1,                 # -1: derive from scale
    'total_steps': -1,
    'weight_decay': 0.04,
    'layerwise_decay': 0.98,
    'ema_momentum': 0.999,
    'clip_grad': 3.0,

    # crops and masks
    'global_size': 32,
    'local_size': 16,
    'n_local': 8,
    'mask_probability': 0.5,
    'mask_ratio_min': 0.1,
    'mask_ratio_max': 0.5,

    # Gram anchoring and high-resolution adaptation
    'gram_refresh_interval': 0,
    'gram_max_refreshes': 3,
    'gram_highres_factor': 2,
    'gram_source_step': -1,
    'adapt_toy_factor': 8,

    # distillation
    'roster': '',
    'distill_workers': 6,
    'teacher_cost': 1.0,
    'allgather_byte_cost': 0.0,
    'allgather_bytes': 0,

    # curation
    'curate_source': 'pixels',
    'curate_levels': '32,8,4',
    'curate_size': 128,
    'curate_pixel_size': 8,
    'kmeans_max_iter': 50,

    # probes
    'probe_k': 20,
    'probe_train_size': 256,
    'probe_test_size': 128,
    'probe_epochs': 100,
    'probe_lrs': '0.01,0.03,0.1',
    'probe_wds': '0.0001,0.001',
    'probe_val_fraction': 0.25,
    'probe_dense': True,

    # diagnostics
    'diag_tree': 'teacher',
    'diag_layer': -1,
    'diag_resolution': 0,
    'diag_image_index': 0,
    'diag_ref_row': -1,
    'diag_ref_col': -1,
    'diag_norm': True,
    'locality_radius': 1,
    'pca_variant': -1,
    'image_upscale': 8,
}
