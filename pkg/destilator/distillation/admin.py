from django.contrib import admin

from .models import DistillConfig, RunManifest


class RunManifestInline(admin.TabularInline):
    model = RunManifest
    extra = 0
    can_delete = False
    readonly_fields = ["config_hash", "dataset_checksum", "build", "output_dir", "created_at"]
    fields = readonly_fields


class DistillConfigAdmin(admin.ModelAdmin):
    list_display = ["__str__", "dataset", "sparse", "unet", "weight_sim", "weight_feat"]
    list_filter = ["sparse", "unet", "teacher_kind", "similarity_mode"]
    fieldsets = [
        (section, {"fields": names}) for section, names in DistillConfig.SECTIONS.items()
    ]
    inlines = [RunManifestInline]


admin.site.register(DistillConfig, DistillConfigAdmin)


class RunManifestAdmin(admin.ModelAdmin):
    list_display = ["output_dir", "config", "build", "created_at"]
    readonly_fields = [
        "config",
        "config_hash",
        "config_text",
        "dataset_checksum",
        "build",
        "output_dir",
        "created_at",
    ]

    def has_add_permission(self, request):
        return False

    def has_change_permission(self, request, obj=None):
        return False


admin.site.register(RunManifest, RunManifestAdmin)
