from django.db import models


# --------------------
# Training Run Model
# --------------------
class TrainingRun(models.Model):
    """One invocation of a dinolab subcommand and the directory it wrote (the run manifest)."""

    SUBCOMMAND_CHOICES = (
        ("pretrain", "Pre-train"),
        ("refine", "Gram refinement"),
        ("hires-adapt", "High-resolution adaptation"),
        ("distill", "Distillation"),
        ("curate", "Curation"),
        ("probe", "Probes"),
        ("diagnose", "Diagnostics"),
        ("simulate-distill", "Distillation plan"),
    )

    STATUS_CHOICES = (
        ("running", "Running"),
        ("completed", "Completed"),
        ("failed", "Failed"),
    )

    id = models.BigAutoField(primary_key=True)
    subcommand = models.CharField(max_length=20, choices=SUBCOMMAND_CHOICES)
    run_dir = models.CharField(max_length=500, unique=True)
    config_hash = models.CharField(max_length=64)
    seed = models.BigIntegerField(default=0)
    start_step = models.BigIntegerField(default=0)
    end_step = models.BigIntegerField(default=0)

    # Lineage: the checkpoint this phase continues from and the run that wrote it
    parent_checkpoint = models.CharField(max_length=500, blank=True, default='')
    parent = models.ForeignKey('self', related_name="children", on_delete=models.SET_NULL, null=True, blank=True)
    gram_checkpoint = models.CharField(max_length=500, blank=True, default='')

    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default="running")
    exit_code = models.IntegerField(default=0)
    error = models.TextField(blank=True, default='')
    artifact_versions = models.JSONField(default=dict, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"Run #{self.id} - {self.subcommand} - {self.status}"

    def lineage(self):
        """This run followed by its ancestors, nearest first."""
        chain, seen, node = [], set(), self
        while node is not None and node.pk not in seen:
            seen.add(node.pk)
            chain.append(node)
            node = node.parent
        return chain
