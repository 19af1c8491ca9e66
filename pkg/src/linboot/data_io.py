"""Synthetic data, CSV ingestion, and persistence of fits and replicate tables.

On-disk layout
--------------
Expression CSV (long format), header ``gene_id,time,replicate,expression``;
one row per measurement. Observation columns are ordered by
``(time, replicate)`` and genes by first appearance.

Fit archive (JSON)::

    {"format": "linboot-fit", "version": 1,
     "config": {"n_clusters": .., "degree": .., "df": .., "knots": [...]},
     "priors": {...}, "data_digest": "<sha256>", "config_digest": "<sha256>",
     "fit": {"eta_star": [...], "kl_value": .., ...},
     "sensitivity": null | {"S": [[...]], "seconds": .., "residual": ..}}

Floats are written with ``repr`` (shortest round-tripping decimal), so every
numeric field reloads bit-exactly. ``config_digest`` covers config, priors
and data digest; a mismatch on load is refused.

Replicate table, header ``replicate,mode,fm,nmi,kl,weights_seed,converged``.
Wall times live in a sidecar table ``replicate,mode,seconds`` so that the
replicate table itself is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchiveError, DataError
from .model import Dataset, Priors, stick_probs
from .splines import TimeGrid, make_basis

FIT_FORMAT = "linboot-fit"
FIT_VERSION = 1
CSV_HEADER = ("gene_id", "time", "replicate", "expression")
REPLICATE_HEADER = ("replicate", "mode", "fm", "nmi", "kl", "weights_seed", "converged")
TIMING_HEADER = ("replicate", "mode", "seconds")


def fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationTruth:
    true_labels: np.ndarray  # 1-based
    true_beta: np.ndarray
    true_tau: float
    true_offsets: np.ndarray
    true_sticks: np.ndarray

    def to_dict(self):
        return {
            "true_labels": self.true_labels.tolist(),
            "true_beta": self.true_beta.tolist(),
            "true_tau": self.true_tau,
            "true_offsets": self.true_offsets.tolist(),
            "true_sticks": self.true_sticks.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["true_labels"], dtype=int), np.asarray(d["true_beta"]),
                   float(d["true_tau"]), np.asarray(d["true_offsets"]),
                   np.asarray(d["true_sticks"]))


def default_times(n_times: int = 14, n_replicates: int = 1) -> np.ndarray:
    """Unevenly spaced times, denser early, each repeated ``n_replicates`` times."""
    base = np.round(np.geomspace(1.0, 1.0 + 4 * n_times, n_times) - 1.0, 6)
    return np.repeat(base, n_replicates)


def simulate(n_genes: int, n_true: int, grid, priors: Priors | None = None,
             separation: float = 5.0, seed: int = 0, noise_sd: float = 1.0,
             degree: int = 3, df: int = 7):
    """Draw a dataset from the generative model.

    Sticks come from ``Beta(1, alpha)`` truncated at ``n_true`` components and
    labels from the resulting stick-breaking weights. Cluster coefficient
    vectors are ``beta_mean + separation * noise_sd * xi_k`` with standard
    normal ``xi_k``, i.e. each coefficient is spread by ``separation`` noise
    standard deviations. Offsets follow their prior and observation noise
    has standard deviation ``noise_sd``.
    """
    priors = priors or Priors()
    if n_genes < 1 or n_true < 1:
        raise ValueError("n_genes and n_true must be positive")
    if not noise_sd >= 0:
        raise ValueError("noise_sd must be non-negative")
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(np.asarray(grid, dtype=float))
    basis = make_basis(grid, degree, df)
    rng = np.random.default_rng(seed)

    nu = rng.beta(1.0, priors.alpha, size=n_true - 1)
    pi = np.asarray(stick_probs(nu))
    labels = rng.choice(n_true, size=n_genes, p=pi / pi.sum())
    beta = priors.beta_mean + separation * noise_sd * rng.standard_normal((n_true, df))
    offsets = priors.b_mean + np.sqrt(priors.b_var) * rng.standard_normal(n_genes)
    noise = noise_sd * rng.standard_normal((n_genes, grid.n_obs))
    y = beta[labels] @ basis.X.T + offsets[:, None] + noise

    ids = tuple(f"gene{g:05d}" for g in range(n_genes))
    true_tau = np.inf if noise_sd == 0 else 1.0 / noise_sd ** 2
    truth = SimulationTruth(labels + 1, beta, true_tau, offsets, nu)
    return Dataset(y=y, grid=grid, basis=basis, gene_ids=ids), truth


def save_truth(truth: SimulationTruth, path):
    _atomic_write_text(path, json.dumps(truth.to_dict(), indent=1))


def load_truth(path) -> SimulationTruth:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"truth file not found: {path}")
    return SimulationTruth.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def save_csv(data: Dataset, path, replicates=None):
    """Write ``data`` in long format.

    Replicate indices default to the rank of each column among columns that
    share its time.
    """
    times = data.grid.obs_times
    if replicates is None:
        replicates = np.zeros(times.size, dtype=int)
        for i in range(1, times.size):
            replicates[i] = replicates[i - 1] + 1 if times[i] == times[i - 1] else 0
    rows = []
    for gid, yg in zip(data.gene_ids, data.y):
        for t, r, v in zip(times, replicates, yg):
            rows.append((gid, fmt(t), int(r), fmt(v)))
    _atomic_write_csv(path, CSV_HEADER, rows)


def load_csv(path, degree: int = 3, df: int = 7) -> Dataset:
    """Read a long-format expression file into a :class:`Dataset`.

    Raises
    ------
    DataError
        On a malformed header, non-numeric values (with the row number),
        duplicate ``(gene, time, replicate)`` keys, or genes missing
        observations that other genes have.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    cells: dict = {}
    gene_order: dict = {}
    columns: set = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            gid, t_raw, r_raw, v_raw = (s.strip() for s in row)
            try:
                t = float(t_raw)
                rep = int(r_raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric time or replicate") from None
            try:
                v = float(v_raw)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: non-numeric expression value {v_raw!r}") from None
            if not (math.isfinite(v) and math.isfinite(t)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            key = (gid, t, rep)
            if key in cells:
                raise DataError(f"{path}:{lineno}: duplicate key gene={gid} time={t} "
                                f"replicate={rep}")
            cells[key] = v
            gene_order.setdefault(gid, len(gene_order))
            columns.add((t, rep))
    if not cells:
        raise DataError(f"{path}: no data rows")

    cols = sorted(columns)
    genes = sorted(gene_order, key=gene_order.get)
    y = np.empty((len(genes), len(cols)))
    missing = []
    for i, gid in enumerate(genes):
        for j, (t, rep) in enumerate(cols):
            v = cells.get((gid, t, rep))
            if v is None:
                missing.append(f"{gid}@(time={t}, replicate={rep})")
            else:
                y[i, j] = v
    if missing:
        shown = ", ".join(missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise DataError(f"{path}: missing observations: {shown}{more}")
    grid = TimeGrid(np.array([t for t, _ in cols]))
    return Dataset(y=y, grid=grid, basis=make_basis(grid, degree, df), gene_ids=tuple(genes))


# ---------------------------------------------------------------------------
# Fit archive
# ---------------------------------------------------------------------------

def data_digest(data: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.y).tobytes())
    h.update(np.ascontiguousarray(data.grid.obs_times).tobytes())
    h.update("\x1f".join(data.gene_ids).encode())
    return h.hexdigest()


def _config_digest(config: dict, priors: dict, ddigest: str) -> str:
    blob = json.dumps({"config": config, "priors": priors, "data": ddigest},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class FitArchive:
    eta_star: np.ndarray
    priors: Priors
    n_clusters: int
    degree: int
    df: int
    knots: np.ndarray
    data_digest: str
    fit: dict
    S: np.ndarray | None = None
    sensitivity: dict | None = None

    @property
    def config(self) -> dict:
        return {"n_clusters": self.n_clusters, "degree": self.degree, "df": self.df,
                "knots": [float(k) for k in self.knots]}

    @property
    def config_digest(self) -> str:
        return _config_digest(self.config, self.priors.to_dict(), self.data_digest)

    def check_data(self, data: Dataset):
        if data_digest(data) != self.data_digest:
            raise ArchiveError("fit archive was produced from a different dataset")
        if data.df != self.df or data.basis.degree != self.degree or \
                not np.array_equal(data.basis.knots, self.knots):
            raise ArchiveError("fit archive spline basis does not match the dataset")


def make_archive(fit, data: Dataset, priors: Priors, n_clusters: int) -> FitArchive:
    return FitArchive(
        eta_star=np.asarray(fit.eta_star, dtype=float), priors=priors,
        n_clusters=n_clusters, degree=data.basis.degree, df=data.df,
        knots=np.asarray(data.basis.knots), data_digest=data_digest(data),
        fit=fit.to_dict(),
    )


def save_fit(archive: FitArchive, path):
    doc = {
        "format": FIT_FORMAT,
        "version": FIT_VERSION,
        "config": archive.config,
        "priors": archive.priors.to_dict(),
        "data_digest": archive.data_digest,
        "config_digest": archive.config_digest,
        "fit": {**archive.fit, "eta_star": archive.eta_star.tolist()},
        "sensitivity": None if archive.S is None else {
            **(archive.sensitivity or {}), "S": archive.S.tolist()},
    }
    _atomic_write_text(path, json.dumps(doc, indent=1, allow_nan=True))


def load_fit(path, data: Dataset | None = None) -> FitArchive:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"fit archive not found: {path} (run `linboot fit` first)")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: not a valid archive ({exc})") from None
    if doc.get("format") != FIT_FORMAT:
        raise ArchiveError(f"{path}: not a linboot fit archive")
    if doc.get("version") != FIT_VERSION:
        raise ArchiveError(f"{path}: archive version {doc.get('version')} is not "
                           f"supported (expected {FIT_VERSION})")
    cfg = doc["config"]
    fit = dict(doc["fit"])
    eta = np.asarray(fit.pop("eta_star"), dtype=float)
    sens = doc.get("sensitivity")
    S = None
    if sens is not None:
        sens = dict(sens)
        S = np.asarray(sens.pop("S"), dtype=float)
    archive = FitArchive(
        eta_star=eta, priors=Priors(**doc["priors"]), n_clusters=int(cfg["n_clusters"]),
        degree=int(cfg["degree"]), df=int(cfg["df"]), knots=np.asarray(cfg["knots"]),
        data_digest=doc["data_digest"], fit=fit, S=S, sensitivity=sens,
    )
    if archive.config_digest != doc.get("config_digest"):
        raise ArchiveError(f"{path}: config digest mismatch; archive was modified")
    if data is not None:
        archive.check_data(data)
    return archive


# ---------------------------------------------------------------------------
# Delimited tables
# ---------------------------------------------------------------------------

def write_table(path, header, rows):
    _atomic_write_csv(path, header, rows)


def read_table(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"table not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_replicates(path, replicates):
    rows = [(r.replicate, r.mode, fmt(r.fm), fmt(r.nmi), fmt(r.kl), r.weights_seed,
             int(r.converged)) for r in replicates]
    _atomic_write_csv(path, REPLICATE_HEADER, rows)


def save_timings(path, replicates):
    rows = [(r.replicate, r.mode, fmt(r.seconds)) for r in replicates]
    _atomic_write_csv(path, TIMING_HEADER, rows)


def load_replicates(path) -> list[dict]:
    rows = read_table(path)
    out = []
    for row in rows:
        out.append({
            "replicate": int(row["replicate"]), "mode": row["mode"],
            "fm": float(row["fm"]), "nmi": float(row["nmi"]), "kl": float(row["kl"]),
            "weights_seed": int(row["weights_seed"]),
            "converged": bool(int(row["converged"])),
        })
    return out


def save_zetas(path, replicates):
    """Per-replicate cluster probabilities, one row per (replicate, mode, gene)."""
    if not replicates:
        _atomic_write_csv(path, ("replicate", "mode", "gene"), [])
        return
    n_clusters = replicates[0].zeta.shape[1]
    header = ("replicate", "mode", "gene") + tuple(f"z{k}" for k in range(n_clusters))
    rows = []
    for r in replicates:
        for g, zg in enumerate(r.zeta):
            rows.append((r.replicate, r.mode, g, *(fmt(v) for v in zg)))
    _atomic_write_csv(path, header, rows)


def load_zetas(path) -> dict:
    """Return ``{(replicate, mode): zeta}``."""
    rows = read_table(path)
    grouped: dict = {}
    for row in rows:
        key = (int(row["replicate"]), row["mode"])
        zk = [float(v) for k, v in row.items() if k.startswith("z")]
        grouped.setdefault(key, []).append((int(row["gene"]), zk))
    return {key: np.array([z for _, z in sorted(vals)]) for key, vals in grouped.items()}


def _scratch_dir(target: Path) -> Path:
    scratch = os.environ.get("LINBOOT_SCRATCH")
    return Path(scratch) if scratch else target.parent


def _atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=_scratch_dir(path), suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    shutil.move(tmp, path)


def _atomic_write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())

