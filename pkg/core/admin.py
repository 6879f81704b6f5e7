from django.contrib import admin
from .models import TrainingRun


# --------------------
# Main Admins
# --------------------
@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ("id", "subcommand", "status", "seed", "start_step", "end_step", "created_at")
    list_filter = ("subcommand", "status")
    search_fields = ("run_dir", "config_hash", "parent_checkpoint")
    readonly_fields = ("config_hash", "artifact_versions", "created_at", "updated_at")
