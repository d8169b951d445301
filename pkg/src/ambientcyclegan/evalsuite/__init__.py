from .embedders import CanonicalEmbedder, DownsampleEmbedder, FeatureEmbedder, RandomProjectionEmbedder, make_embedder
from .metrics import (
    RadialSpectrum,
    SsimPairs,
    feature_stats,
    fid,
    frechet_distance,
    high_frequency_power,
    ks_statistic,
    log_spectrum_distance,
    radial_power_spectrum,
    ssim,
    ssim_batch,
    ssim_pair_pdf,
)
from .observer import (
    RocResult,
    SignalParams,
    SkeDataset,
    central_crop,
    ho_roc,
    ho_study,
    ho_template,
    make_ske_dataset,
    mann_whitney_auc,
    roc_curve,
)
from .report import EvalReport, evaluate
