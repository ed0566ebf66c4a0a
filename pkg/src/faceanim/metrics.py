"""Evaluation metrics: L1, PSNR, SSIM, AKD, FID, and plugin-backed CSIM.

Image arguments are float arrays (H, W, 3) or (H, W) in [0, 1]. Feature
embedders, landmark detectors, and identity encoders are pluggable
callables so the suite stays free of pretrained weights; every reported
value names the backend that produced it.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0


class MetricError(RuntimeError):
    pass


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def l1(x, y):
    """Mean absolute difference on the [0, 1] scale."""
    x, y = _check_pair(x, y)
    return float(np.abs(x - y).mean())


def psnr(x, y):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    x, y = _check_pair(x, y)
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse), PSNR_CAP_DB))


def _gaussian_window(size=11, sigma=1.5):
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def _filter2_valid(img, window):
    kh, kw = window.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += window[i, j] * img[i:i + h - kh + 1, j:j + w - kw + 1]
    return out


def ssim(x, y, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Structural similarity with an 11x11 Gaussian window on a [0, 1]
    dynamic range, averaged over valid windows (and channels if any)."""
    x, y = _check_pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[0], x.shape[1]) < window_size:
        raise MetricError(f"images smaller than the {window_size}x{window_size} window")
    window = _gaussian_window(window_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    values = []
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]
        mu_x = _filter2_valid(xc, window)
        mu_y = _filter2_valid(yc, window)
        sig_x = _filter2_valid(xc * xc, window) - mu_x * mu_x
        sig_y = _filter2_valid(yc * yc, window) - mu_y * mu_y
        sig_xy = _filter2_valid(xc * yc, window) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
        values.append((num / den).mean())
    return float(np.mean(values))


def akd(pred_frames, gt_frames, landmark_plugin):
    """Average keypoint distance in pixels between two frame sequences.

    Frames where the plugin fails (returns None) on either side are
    skipped and counted. Returns (distance, used_frames, skipped_frames).
    """
    if len(pred_frames) != len(gt_frames):
        raise MetricError("sequences must have equal length")
    distances = []
    skipped = 0
    for pred, gt in zip(pred_frames, gt_frames):
        lp = landmark_plugin(pred)
        lg = landmark_plugin(gt)
        if lp is None or lg is None:
            skipped += 1
            continue
        lp, lg = np.asarray(lp, dtype=np.float64), np.asarray(lg, dtype=np.float64)
        if lp.shape != lg.shape:
            raise MetricError("landmark plugin returned inconsistent shapes")
        distances.append(np.linalg.norm(lp - lg, axis=-1).mean())
    if not distances:
        raise MetricError("no detectable faces in either sequence")
    return float(np.mean(distances)), len(distances), skipped


def _psd_sqrt(mat, warn_threshold=1e-6):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    worst = float(vals.min())
    if worst < -warn_threshold:
        warnings.warn(f"clipping negative eigenvalue {worst:.3e} in matrix sqrt")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b):
    """Frechet distance between Gaussian fits of two feature sets (n, d)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError("feature sets must be 2-D with a common dimension")
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise MetricError(f"need at least {d + 1} samples per set for a "
                          f"rank-{d} covariance, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    value = float(((mu_a - mu_b) ** 2).sum()
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def csim(pred_frames, gt_frames, identity_plugin):
    """Mean cosine similarity of identity embeddings, or None if no plugin."""
    if identity_plugin is None:
        return None
    if len(pred_frames) != len(gt_frames):
        raise MetricError("sequences must have equal length")
    sims = []
    for pred, gt in zip(pred_frames, gt_frames):
        ep = np.asarray(identity_plugin(pred), dtype=np.float64).ravel()
        eg = np.asarray(identity_plugin(gt), dtype=np.float64).ravel()
        denom = np.linalg.norm(ep) * np.linalg.norm(eg)
        if denom == 0:
            raise MetricError("identity plugin returned a zero embedding")
        sims.append(float(ep @ eg / denom))
    return float(np.mean(sims))


class PixelMomentEmbedder:
    """Weight-free FID embedder: per-channel means/stds, global luminance
    std, and a coarse 4x4 grid of luminance averages (23 dims)."""

    identifier = "pixel-moments-v1"
    feature_dim = 23

    def __call__(self, frame):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim == 2:
            frame = frame[..., None].repeat(3, axis=-1)
        means = frame.mean(axis=(0, 1))
        stds = frame.std(axis=(0, 1))
        lum = frame.mean(axis=2)
        h, w = lum.shape
        grid = [lum[i * h // 4:(i + 1) * h // 4, j * w // 4:(j + 1) * w // 4].mean()
                for i in range(4) for j in range(4)]
        lum_std = lum.std()
        return np.concatenate([means, stds, [lum_std], grid])


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    backends: dict = field(default_factory=dict)

    def to_dict(self):
        return {"metrics": self.metrics, "counts": self.counts,
                "backends": self.backends}


def evaluate_sequences(pred_frames, gt_frames, embedder=None,
                       landmark_plugin=None, identity_plugin=None,
                       perceptual_plugin=None):
    """Full metric sweep over two aligned frame sequences."""
    if len(pred_frames) != len(gt_frames) or not pred_frames:
        raise MetricError("need two non-empty sequences of equal length")
    report = MetricReport()
    report.counts["frames"] = len(pred_frames)

    l1_values = [l1(p, g) for p, g in zip(pred_frames, gt_frames)]
    report.metrics["l1"] = float(np.mean(l1_values))
    report.metrics["l1_255"] = 255.0 * report.metrics["l1"]
    report.metrics["psnr"] = float(np.mean(
        [psnr(p, g) for p, g in zip(pred_frames, gt_frames)]))
    report.metrics["ssim"] = float(np.mean(
        [ssim(p, g) for p, g in zip(pred_frames, gt_frames)]))
    report.backends["l1"] = report.backends["psnr"] = report.backends["ssim"] = "builtin"

    embedder = embedder or PixelMomentEmbedder()
    feats_p = np.stack([embedder(f) for f in pred_frames])
    feats_g = np.stack([embedder(f) for f in gt_frames])
    dim = feats_p.shape[1]
    if len(pred_frames) >= dim + 1:
        report.metrics["fid"] = fid(feats_p, feats_g)
        report.backends["fid"] = getattr(embedder, "identifier", "custom")
    else:
        report.metrics["fid"] = None
        report.backends["fid"] = (f"unavailable (need >= {dim + 1} frames for "
                                  f"{getattr(embedder, 'identifier', 'custom')})")

    if landmark_plugin is not None:
        value, used, skipped = akd(pred_frames, gt_frames, landmark_plugin)
        report.metrics["akd"] = value
        report.counts["akd_frames"] = used
        report.counts["akd_skipped"] = skipped
        report.backends["akd"] = getattr(landmark_plugin, "identifier", "custom")
    else:
        report.metrics["akd"] = None
        report.backends["akd"] = "unavailable (no landmark plugin)"

    value = csim(pred_frames, gt_frames, identity_plugin)
    if value is None:
        report.metrics["csim"] = None
        report.backends["csim"] = "unavailable (no identity plugin)"
    else:
        report.metrics["csim"] = value
        report.backends["csim"] = getattr(identity_plugin, "identifier", "custom")

    if perceptual_plugin is not None:
        report.metrics["lpips"] = float(np.mean(
            [perceptual_plugin(p, g) for p, g in zip(pred_frames, gt_frames)]))
        report.backends["lpips"] = getattr(perceptual_plugin, "identifier", "custom")
    else:
        report.metrics["lpips"] = None
        report.backends["lpips"] = "unavailable (no perceptual plugin)"
    return report
