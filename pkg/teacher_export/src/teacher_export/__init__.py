from .export import ExportManifest, export

__all__ = ["ExportManifest", "export"]
