#!/usr/bin/env python3
"""Regenerate the bundled synthetic monthly return model.

Twelve assets from a one-factor market model: asset i has annual expected
total return mean_i and annual volatility vol_i, with covariance
beta_i beta_j sigma_f^2 + diag(idio^2) induced by loadings on a single
market factor. Annual figures convert to monthly log-return parameters via

    s_i = vol_i / sqrt(12)
    m_i = log(1 + mean_i) / 12 - s_i^2 / 2

so that monthly total returns r = exp(m + L z), z ~ N(0, I), compound to the
stated annual means. Asset 1 is a low-vol bond-like sleeve with a slightly
negative market loading; the rest are equity sleeves of varying beta.

Run from the repository root:  python scripts/make_return_model.py
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "cocp" / "data" / "markowitz_returns.json"

ASSETS = [
    # (label, annual mean, annual vol, market loading share of variance)
    ("bond_core", 0.045, 0.045, -0.15),
    ("equity_broad", 0.100, 0.150, 0.95),
    ("real_estate", 0.085, 0.190, 0.75),
    ("financials", 0.070, 0.200, 0.85),
    ("health_care", 0.110, 0.140, 0.65),
    ("consumer_disc", 0.120, 0.180, 0.85),
    ("consumer_staples", 0.075, 0.110, 0.55),
    ("utilities", 0.060, 0.130, 0.40),
    ("industrials", 0.095, 0.170, 0.85),
    ("energy", 0.040, 0.260, 0.70),
    ("biotech", 0.160, 0.250, 0.55),
    ("aerospace", 0.150, 0.210, 0.65),
]

SIGMA_F = 0.14  # annual factor volatility


def main() -> None:
    labels = [a[0] for a in ASSETS]
    mean_ann = np.array([a[1] for a in ASSETS])
    vol_ann = np.array([a[2] for a in ASSETS])
    corr_share = np.array([a[3] for a in ASSETS])

    beta = corr_share * vol_ann / SIGMA_F
    factor_var = (beta * SIGMA_F) ** 2
    idio_var = np.maximum(vol_ann**2 - factor_var, 1e-6)
    cov_ann = np.outer(beta, beta) * SIGMA_F**2 + np.diag(idio_var)

    s_month = vol_ann / np.sqrt(12.0)
    m_month = np.log1p(mean_ann) / 12.0 - 0.5 * s_month**2
    scale = s_month / vol_ann
    cov_month = cov_ann * np.outer(scale, scale)

    payload = {
        "description": (
            "Synthetic monthly log-return model: 12 assets, one-factor "
            "covariance, annualized means/vols listed per asset. "
            "Regenerate with scripts/make_return_model.py."
        ),
        "labels": labels,
        "annual_mean": mean_ann.tolist(),
        "annual_vol": vol_ann.tolist(),
        "mu_log_monthly": m_month.tolist(),
        "cov_log_monthly": cov_month.tolist(),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
