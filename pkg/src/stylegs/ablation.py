"""Paired Stage-2 runs and the comparison statistics reported for each ablation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .imageops import hstack
from .metrics import StyleFeatureBank, gram_style_distance, mask_iou, masked_rmse, object_mask
from .pipeline import WHITE, ring_cameras, stage2_stylize, styled_oracle
from .rasterizer import radius_stats, render
from .regularizer import surface_loss

ABLATIONS = ("scaling", "camera", "lora", "lambda", "timestep")
LAMBDA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)
TIMESTEP_BOUNDS = ((0.0, 1.0), (0.02, 0.98), (0.2, 0.8), (0.5, 1.0))
CAMERA_SEEDS = (0, 1, 2)
IOU_MIN = 0.9
VARIANCE_RATIO_MAX = 0.2


@dataclass
class ArmReport:
    label: str
    settings: dict
    gram_distance: float
    iou: list
    radius_p95: list
    log_area_variance: float
    rmse_to_target: list

    @property
    def mean_rmse(self):
        return float(np.mean(self.rmse_to_target))


@dataclass
class AblationReport:
    which: str
    arms: list
    checks: dict = field(default_factory=dict)
    strip: np.ndarray = None

    @property
    def passed(self):
        return all(self.checks.values())

    def as_dict(self):
        return {
            "ablation": self.which,
            "arms": [dict(asdict(a), mean_rmse=a.mean_rmse) for a in self.arms],
            "checks": {k: bool(v) for k, v in self.checks.items()},
        }


def evaluate_arm(label, settings, cloud, o1, style_image, config, bank=None):
    """Per-view statistics of ``cloud`` on the fixed ring, against ``o1``."""
    bank = bank or StyleFeatureBank(config.seed)
    oracle = styled_oracle(o1, style_image, config)
    grams, ious, p95s, rmses = [], [], [], []
    for k, cam in enumerate(ring_cameras(config)):
        out = render(cloud, cam, WHITE)
        ref = render(o1, cam, WHITE)
        mask = object_mask(out)
        ref_mask = object_mask(ref)
        grams.append(gram_style_distance(out.rgb, style_image, bank, mask) if mask.any() else np.inf)
        ious.append(mask_iou(mask, ref_mask))
        stats = radius_stats(out)
        p95s.append(stats.p95 if stats else 0.0)
        rmse = masked_rmse(out.rgb, oracle.clean_target(f"ring{k}"), ref_mask)
        rmses.append(np.inf if rmse is None else rmse)
    return ArmReport(
        label=label,
        settings=settings,
        gram_distance=float(np.mean(grams)),
        iou=[float(v) for v in ious],
        radius_p95=[float(v) for v in p95s],
        log_area_variance=surface_loss(cloud, mean_of_logs=True).loss,
        rmse_to_target=[float(v) for v in rmses],
    )


def _arm(label, settings, o1, style_image, config, denoiser, bank):
    cfg = config.replace(**settings)
    result = stage2_stylize(o1, style_image, cfg, denoiser=denoiser)
    report = evaluate_arm(label, settings, result.cloud, o1, style_image, cfg, bank)
    view0 = render(result.cloud, ring_cameras(cfg)[0], WHITE).rgb
    return report, view0


def _arm_settings(which, config):
    if which == "scaling":
        return [("surface loss on", {}), ("surface loss off", {"surface_weight": 0.0})]
    if which == "camera":
        return [
            (f"{strategy} seed {seed}", {"camera_strategy": strategy, "seed": seed})
            for seed in CAMERA_SEEDS
            for strategy in ("fixed-ring-4", "random")
        ]
    if which == "lora":
        return [("lora", {"psi_source": "lora"}), ("no lora", {"psi_source": "none"})]
    if which == "lambda":
        return [(f"lambda {lam}", {"lambda_scale": lam}) for lam in LAMBDA_SWEEP]
    if which == "timestep":
        return [(f"t in [{lo}, {hi})", {"t_lo": lo, "t_hi": hi}) for lo, hi in TIMESTEP_BOUNDS]
    raise ValueError(f"unknown ablation {which!r}; choose from {ABLATIONS}")


def _checks(which, arms):
    if which == "scaling":
        on, off = arms
        ratio = on.log_area_variance / off.log_area_variance if off.log_area_variance > 0 else np.inf
        return {
            "log-area variance ratio <= 0.2": ratio <= VARIANCE_RATIO_MAX,
            "radius p95 smaller on every view": all(a < b for a, b in zip(on.radius_p95, off.radius_p95)),
        }
    if which == "camera":
        fixed = np.mean([a.mean_rmse for a in arms if a.settings["camera_strategy"] == "fixed-ring-4"])
        rand = np.mean([a.mean_rmse for a in arms if a.settings["camera_strategy"] == "random"])
        return {"fixed-ring rmse <= random-orbit rmse": fixed <= rand}
    if which == "lambda":
        grams = [a.gram_distance for a in arms]
        return {
            "gram distance strictly decreasing": all(b < a for a, b in zip(grams, grams[1:])),
            "iou > 0.9 at every lambda": all(min(a.iou) > IOU_MIN for a in arms),
        }
    return {}


def run_ablation(which, o1, style_image, config, denoiser=None):
    """Run every arm of ``which`` from the same Stage-1 cloud and compare them."""
    bank = StyleFeatureBank(config.seed)
    arms, views = [], []
    for label, settings in _arm_settings(which, config):
        report, view0 = _arm(label, settings, o1, style_image, config, denoiser, bank)
        arms.append(report)
        views.append(view0)
    return AblationReport(which=which, arms=arms, checks=_checks(which, arms), strip=hstack(views))


def format_table(report):
    lines = [f"{'arm':<26} {'gram':>8} {'rmse':>8} {'min iou':>8} {'p95 max':>8} {'logvar':>8}"]
    for a in report.arms:
        lines.append(f"{a.label:<26} {a.gram_distance:8.4f} {a.mean_rmse:8.4f} {min(a.iou):8.3f} "
                     f"{max(a.radius_p95):8.2f} {a.log_area_variance:8.4f}")
    for name, ok in report.checks.items():
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
    return "\n".join(lines)
