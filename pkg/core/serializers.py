from rest_framework import serializers
from .models import TrainingRun


OUTLIER_STRATEGY_CHOICES = ('registers', 'attention_bias', 'value_gating', 'none')
CURATE_SOURCE_CHOICES = ('pixels', 'checkpoint')
TREE_CHOICES = ('teacher', 'student', 'gram_teacher')


class RunConfigSerializer(serializers.Serializer):
    """
    Every accepted run-config key with its type. Values arrive as text (config
    file, --set overrides) or already typed (settings defaults); unknown keys
    are rejected by name.
    """

    # run
    seed = serializers.IntegerField(min_value=0)
    scale = serializers.IntegerField(min_value=1)
    steps = serializers.IntegerField(min_value=0)
    checkpoint_every = serializers.IntegerField(min_value=0)
    log_every = serializers.IntegerField(min_value=0)
    from_checkpoint = serializers.CharField(allow_blank=True)
    gram_checkpoint = serializers.CharField(allow_blank=True)
    run_dir = serializers.CharField(allow_blank=True)

    # data
    dataset_size = serializers.IntegerField(min_value=1)
    image_size = serializers.IntegerField(min_value=1)
    batch_size = serializers.IntegerField(min_value=1)
    p_homogeneous = serializers.FloatField(min_value=0.0, max_value=1.0)
    homogeneous_part = serializers.CharField()
    curated_index = serializers.CharField(allow_blank=True)
    part_weights = serializers.CharField(allow_blank=True)

    # backbone
    depth = serializers.IntegerField(min_value=1)
    embed_dim = serializers.IntegerField(min_value=1)
    ffn_hidden_dim = serializers.IntegerField(min_value=1)
    head_count = serializers.IntegerField(min_value=1)
    head_dim = serializers.IntegerField(min_value=2)
    patch_size = serializers.IntegerField(min_value=1)
    register_count = serializers.IntegerField(min_value=0)
    rope_jitter_min = serializers.FloatField()
    rope_jitter_max = serializers.FloatField()
    outlier_strategy = serializers.ChoiceField(choices=OUTLIER_STRATEGY_CHOICES)
    stochastic_depth_rate = serializers.FloatField(min_value=0.0, max_value=0.99)
    separate_output_norms = serializers.BooleanField()

    # heads
    head_hidden_dim = serializers.IntegerField(min_value=1)
    head_bottleneck_dim = serializers.IntegerField(min_value=1)
    prototype_count = serializers.IntegerField(min_value=1)
    head_layers = serializers.IntegerField(min_value=1)

    # losses
    student_temp = serializers.FloatField()
    teacher_temp_start = serializers.FloatField()
    teacher_temp_end = serializers.FloatField()
    sinkhorn_iters = serializers.IntegerField(min_value=1)
    koleo_group_size = serializers.IntegerField(min_value=2)
    w_dino = serializers.FloatField(min_value=0.0)
    w_ibot = serializers.FloatField(min_value=0.0)
    w_koleo = serializers.FloatField(min_value=0.0)
    w_gram = serializers.FloatField(min_value=0.0)

    # optimizer and schedules
    base_lr = serializers.FloatField(min_value=0.0)
    warmup_steps = serializers.IntegerField(min_value=-1)
    total_steps = serializers.IntegerField(min_value=-1)
    weight_decay = serializers.FloatField(min_value=0.0)
    layerwise_decay = serializers.FloatField(min_value=0.0, max_value=1.0)
    ema_momentum = serializers.FloatField()
    clip_grad = serializers.FloatField(min_value=0.0)

    # crops and masks
    global_size = serializers.IntegerField(min_value=1)
    local_size = serializers.IntegerField(min_value=1)
    n_local = serializers.IntegerField(min_value=0)
    mask_probability = serializers.FloatField(min_value=0.0, max_value=1.0)
    mask_ratio_min = serializers.FloatField(min_value=0.0, max_value=1.0)
    mask_ratio_max = serializers.FloatField(min_value=0.0, max_value=1.0)

    # Gram anchoring and high-resolution adaptation
    gram_refresh_interval = serializers.IntegerField(min_value=0)
    gram_max_refreshes = serializers.IntegerField(min_value=0)
    gram_highres_factor = serializers.IntegerField(min_value=1)
    gram_source_step = serializers.IntegerField(min_value=-1)
    adapt_toy_factor = serializers.IntegerField(min_value=1)

    # distillation
    roster = serializers.CharField(allow_blank=True)
    distill_workers = serializers.IntegerField(min_value=1)
    teacher_cost = serializers.FloatField()
    allgather_byte_cost = serializers.FloatField(min_value=0.0)
    allgather_bytes = serializers.IntegerField(min_value=0)

    # curation
    curate_source = serializers.ChoiceField(choices=CURATE_SOURCE_CHOICES)
    curate_levels = serializers.CharField()
    curate_size = serializers.IntegerField(min_value=0)
    curate_pixel_size = serializers.IntegerField(min_value=1)
    kmeans_max_iter = serializers.IntegerField(min_value=1)

    # probes
    probe_k = serializers.IntegerField(min_value=1)
    probe_train_size = serializers.IntegerField(min_value=1)
    probe_test_size = serializers.IntegerField(min_value=1)
    probe_epochs = serializers.IntegerField(min_value=1)
    probe_lrs = serializers.CharField()
    probe_wds = serializers.CharField()
    probe_val_fraction = serializers.FloatField(min_value=0.0, max_value=0.9)
    probe_dense = serializers.BooleanField()

    # diagnostics
    diag_tree = serializers.ChoiceField(choices=TREE_CHOICES)
    diag_layer = serializers.IntegerField(min_value=-1)
    diag_resolution = serializers.IntegerField(min_value=0)
    diag_image_index = serializers.IntegerField(min_value=0)
    diag_ref_row = serializers.IntegerField(min_value=-1)
    diag_ref_col = serializers.IntegerField(min_value=-1)
    diag_norm = serializers.BooleanField()
    locality_radius = serializers.IntegerField(min_value=1)
    pca_variant = serializers.IntegerField(min_value=-1, max_value=47)
    image_upscale = serializers.IntegerField(min_value=1)

    def to_internal_value(self, data):
        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({'unknown_keys': unknown})
        return super().to_internal_value(data)

    def validate(self, attrs):
        if attrs['embed_dim'] != attrs['head_count'] * attrs['head_dim']:
            raise serializers.ValidationError({'embed_dim': 'embed_dim must equal head_count x head_dim'})
        if not 0 < attrs['rope_jitter_min'] <= attrs['rope_jitter_max']:
            raise serializers.ValidationError({'rope_jitter_min': 'need 0 < rope_jitter_min <= rope_jitter_max'})
        if attrs['mask_ratio_min'] > attrs['mask_ratio_max']:
            raise serializers.ValidationError({'mask_ratio_min': 'mask_ratio_min exceeds mask_ratio_max'})
        for key in ('student_temp', 'teacher_temp_start', 'teacher_temp_end', 'teacher_cost'):
            if attrs[key] <= 0:
                raise serializers.ValidationError({key: 'must be positive'})
        if not 0 < attrs['ema_momentum'] < 1:
            raise serializers.ValidationError({'ema_momentum': 'must lie in (0, 1)'})
        return attrs


class TrainingRunSerializer(serializers.ModelSerializer):
    lineage = serializers.SerializerMethodField()

    class Meta:
        model = TrainingRun
        fields = [
            'id', 'subcommand', 'run_dir', 'config_hash', 'seed', 'start_step', 'end_step',
            'parent_checkpoint', 'parent', 'gram_checkpoint', 'lineage',
            'status', 'exit_code', 'error', 'artifact_versions',
            'created_at', 'updated_at'
        ]
        read_only_fields = fields

    def get_lineage(self, obj):
        return [run.id for run in obj.lineage()[1:]]
