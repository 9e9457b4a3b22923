"""File formats: PFM, 16-bit PNG depth, manifests, raster containers, reports."""

from .bundles import (invert_space, load_prediction_dir, prediction_path,
                      read_preimage, read_refiner_config, read_refiner_params,
                      save_prediction_dir, write_preimage, write_refiner_params)
from .container import RasterRecord, read_container, write_container
from .manifest import (Manifest, ManifestEntry, load_entry_gt, load_manifest,
                       write_manifest)
from .pfm import read_pfm, write_pfm
from .plots import (render_bench_plot, render_boxplot_png, render_boxplot_svg,
                    render_loss_curves)
from .png16 import read_depth_png16, write_depth_png16
from .reports import (read_report, read_scores_csv, write_category_stats_csv,
                      write_ranking_csv, write_report)

__all__ = [
    "Manifest", "ManifestEntry", "RasterRecord",
    "invert_space", "load_entry_gt", "load_manifest", "load_prediction_dir",
    "prediction_path", "read_container", "read_depth_png16", "read_pfm",
    "read_preimage", "read_refiner_config", "read_refiner_params",
    "read_report", "read_scores_csv", "render_bench_plot",
    "render_boxplot_png", "render_boxplot_svg", "render_loss_curves",
    "save_prediction_dir", "write_category_stats_csv", "write_container",
    "write_depth_png16", "write_manifest", "write_pfm", "write_preimage",
    "write_ranking_csv", "write_refiner_params", "write_report",
]
