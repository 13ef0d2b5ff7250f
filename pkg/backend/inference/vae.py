"""
Variational autoencoder for excitability fields

Small MLP encoder/decoder pair written directly in numpy: forward passes,
a closed-form KL term, hand-derived backpropagation through both networks and
the reparameterized sampling path, and minibatch Adam. The decoder mean is
squashed to (0, 0.5) so every decoded field lies inside the prior support.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from backend.errors import ModelCorruptError, VaeTrainingError

logger = logging.getLogger(__name__)

ENCODER_LAYERS = ("enc0", "enc1", "enc2")
DECODER_LAYERS = ("dec0", "dec1", "dec2")
WEIGHTS_DIR = "weights"


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden: int = 512
    d_z: int = 2
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class VaeModel:
    """
    Encoder  N -> hidden -> hidden -> 2 d_z  (mean and log-variance)
    Decoder  d_z -> hidden -> hidden -> N    (0.5 * sigmoid)

    ``params`` maps "<layer>_W" / "<layer>_b" to arrays; weights are stored
    input-major so a layer is ``x @ W + b``.
    """

    params: Dict[str, np.ndarray]
    n_nodes: int
    hidden: int
    d_z: int

    @classmethod
    def initialize(cls, n_nodes: int, hidden: int, d_z: int, rng: np.random.Generator) -> "VaeModel":
        """Glorot-uniform weights, zero biases"""
        shapes = {
            "enc0": (n_nodes, hidden),
            "enc1": (hidden, hidden),
            "enc2": (hidden, 2 * d_z),
            "dec0": (d_z, hidden),
            "dec1": (hidden, hidden),
            "dec2": (hidden, n_nodes),
        }
        params = {}
        for name, (fan_in, fan_out) in shapes.items():
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}_W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{name}_b"] = np.zeros(fan_out)
        return cls(params, n_nodes, hidden, d_z)

    def copy(self) -> "VaeModel":
        return VaeModel({k: v.copy() for k, v in self.params.items()}, self.n_nodes, self.hidden, self.d_z)

    def check(self):
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise ModelCorruptError(f"Parameter {name} has non-finite entries")


@dataclass
class TrainResult:
    model: VaeModel
    loss_history: List[float] = field(default_factory=list)
    validation_rmse: Optional[float] = None


def _encoder_forward(model: VaeModel, X: np.ndarray) -> Tuple[np.ndarray, dict]:
    p = model.params
    a1 = X @ p["enc0_W"] + p["enc0_b"]
    h1 = softplus(a1)
    a2 = h1 @ p["enc1_W"] + p["enc1_b"]
    h2 = softplus(a2)
    out = h2 @ p["enc2_W"] + p["enc2_b"]
    return out, {"X": X, "a1": a1, "h1": h1, "a2": a2, "h2": h2}


def _decoder_forward(model: VaeModel, Z: np.ndarray) -> Tuple[np.ndarray, dict]:
    p = model.params
    c1 = Z @ p["dec0_W"] + p["dec0_b"]
    g1 = softplus(c1)
    c2 = g1 @ p["dec1_W"] + p["dec1_b"]
    g2 = softplus(c2)
    c3 = g2 @ p["dec2_W"] + p["dec2_b"]
    s = expit(c3)
    return 0.5 * s, {"Z": Z, "c1": c1, "g1": g1, "c2": c2, "g2": g2, "s": s}


def encode(model: VaeModel, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior parameters q(z | theta).

    Args:
        model: Trained or initialized model
        theta: A field of shape (N,) or a batch (B, N)

    Returns:
        (mu_z, logvar_z), each (d_z,) or (B, d_z)
    """
    X = np.asarray(theta, dtype=float)
    single = X.ndim == 1
    out, _ = _encoder_forward(model, np.atleast_2d(X))
    if not np.all(np.isfinite(out)):
        raise ModelCorruptError("Encoder produced non-finite output")
    mu, logvar = out[:, : model.d_z], out[:, model.d_z:]
    return (mu[0], logvar[0]) if single else (mu, logvar)


def decode_mean(model: VaeModel, z: np.ndarray) -> np.ndarray:
    """Expected field E[p(theta | z)]; every component in (0, 0.5)"""
    Z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("Latent code must be finite")
    single = Z.ndim == 1
    xhat, _ = _decoder_forward(model, np.atleast_2d(Z))
    return xhat[0] if single else xhat


def kl_to_prior(mu_z: np.ndarray, logvar_z: np.ndarray) -> float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over all given rows"""
    mu_z = np.asarray(mu_z, dtype=float)
    logvar_z = np.asarray(logvar_z, dtype=float)
    return float(0.5 * np.sum(np.exp(logvar_z) + mu_z ** 2 - 1.0 - logvar_z))


def elbo_terms(model: VaeModel, theta: np.ndarray, eps: np.ndarray) -> Tuple[float, float]:
    """Batch-mean (KL, reconstruction) for fixed reparameterization noise"""
    X = np.atleast_2d(np.asarray(theta, dtype=float))
    out, _ = _encoder_forward(model, X)
    mu, logvar = out[:, : model.d_z], out[:, model.d_z:]
    Z = mu + np.exp(0.5 * logvar) * np.atleast_2d(eps)
    xhat, _ = _decoder_forward(model, Z)
    batch = X.shape[0]
    kl = kl_to_prior(mu, logvar) / batch
    rec = float(0.5 * np.sum((X - xhat) ** 2) / batch)
    return kl, rec


def elbo_loss(
    model: VaeModel,
    theta: np.ndarray,
    rng: np.random.Generator,
    eps: Optional[np.ndarray] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Negative ELBO averaged over the batch, with its gradient.

    loss = KL(q(z|theta) || N(0, I)) + 0.5 ||theta - decode_mean(z~)||^2,
    z~ = mu + exp(logvar / 2) * eps. The decoder likelihood is a unit-variance
    Gaussian with its constant dropped.

    Args:
        model: Current parameters
        theta: Field (N,) or batch (B, N)
        rng: Draws eps ~ N(0, I) when ``eps`` is not given
        eps: Optional fixed noise of shape (B, d_z)

    Returns:
        (loss, grads) where grads has the same keys and shapes as model.params
    """
    p = model.params
    X = np.atleast_2d(np.asarray(theta, dtype=float))
    batch, dz = X.shape[0], model.d_z
    if eps is None:
        eps = rng.standard_normal((batch, dz))
    eps = np.atleast_2d(eps)

    out, enc = _encoder_forward(model, X)
    mu, logvar = out[:, :dz], out[:, dz:]
    std = np.exp(0.5 * logvar)
    Z = mu + std * eps
    xhat, dec = _decoder_forward(model, Z)

    resid = xhat - X
    kl = 0.5 * np.sum(np.exp(logvar) + mu ** 2 - 1.0 - logvar)
    loss = float((kl + 0.5 * np.sum(resid ** 2)) / batch)
    if not np.isfinite(loss):
        raise VaeTrainingError("Non-finite ELBO loss")

    grads: Dict[str, np.ndarray] = {}
    # decoder
    s = dec["s"]
    d_c3 = resid * 0.5 * s * (1.0 - s) / batch
    grads["dec2_W"] = dec["g2"].T @ d_c3
    grads["dec2_b"] = d_c3.sum(axis=0)
    d_c2 = (d_c3 @ p["dec2_W"].T) * expit(dec["c2"])
    grads["dec1_W"] = dec["g1"].T @ d_c2
    grads["dec1_b"] = d_c2.sum(axis=0)
    d_c1 = (d_c2 @ p["dec1_W"].T) * expit(dec["c1"])
    grads["dec0_W"] = Z.T @ d_c1
    grads["dec0_b"] = d_c1.sum(axis=0)
    d_z = d_c1 @ p["dec0_W"].T

    # sampling path plus KL
    d_mu = d_z + mu / batch
    d_logvar = d_z * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / batch
    d_out = np.concatenate([d_mu, d_logvar], axis=1)

    # encoder
    grads["enc2_W"] = enc["h2"].T @ d_out
    grads["enc2_b"] = d_out.sum(axis=0)
    d_a2 = (d_out @ p["enc2_W"].T) * expit(enc["a2"])
    grads["enc1_W"] = enc["h1"].T @ d_a2
    grads["enc1_b"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ p["enc1_W"].T) * expit(enc["a1"])
    grads["enc0_W"] = enc["X"].T @ d_a1
    grads["enc0_b"] = d_a1.sum(axis=0)
    return loss, grads


class AdamState:
    """First/second moment buffers for every parameter array"""

    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.adam_beta1 ** self.t
        bc2 = 1.0 - cfg.adam_beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = cfg.adam_beta1 * self.m[k] + (1.0 - cfg.adam_beta1) * g
            self.v[k] = cfg.adam_beta2 * self.v[k] + (1.0 - cfg.adam_beta2) * g * g
            params[k] -= cfg.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.adam_eps)


def reconstruction_rmse(model: VaeModel, fields: np.ndarray) -> float:
    """RMSE of decode_mean(encode mean) against the fields"""
    mu, _ = encode(model, np.atleast_2d(fields))
    recon = decode_mean(model, mu)
    return float(np.sqrt(np.mean((recon - np.atleast_2d(fields)) ** 2)))


def split_dataset(dataset: np.ndarray, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffle and hold out ``fraction`` of the rows for validation"""
    order = rng.permutation(dataset.shape[0])
    n_val = int(round(fraction * dataset.shape[0]))
    if n_val >= dataset.shape[0]:
        n_val = dataset.shape[0] - 1
    return dataset[order[n_val:]], dataset[order[:n_val]]


def train_vae(dataset: np.ndarray, cfg: TrainConfig, verbose: bool = False) -> TrainResult:
    """
    Minibatch Adam on the mean negative ELBO.

    Args:
        dataset: (count, N) fields
        cfg: Optimizer and architecture settings; cfg.seed fixes everything
        verbose: Show a progress bar over epochs

    Returns:
        TrainResult with the final model, per-epoch mean loss and validation RMSE
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    if dataset.shape[0] == 0:
        raise ValueError("Training set is empty")
    rng = np.random.default_rng(cfg.seed)

    train, val = split_dataset(dataset, cfg.validation_fraction, rng) if cfg.validation_fraction > 0 else (dataset, dataset[:0])
    model = VaeModel.initialize(dataset.shape[1], cfg.hidden, cfg.d_z, rng)
    adam = AdamState(model.params, cfg)
    logger.info(
        f"[VAE] Training on {train.shape[0]} fields ({val.shape[0]} held out), "
        f"hidden={cfg.hidden}, d_z={cfg.d_z}, epochs={cfg.epochs}"
    )

    history: List[float] = []
    for epoch in tqdm(range(cfg.epochs), desc="VAE epochs", disable=not verbose):
        order = rng.permutation(train.shape[0])
        total = 0.0
        for start in range(0, train.shape[0], cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            try:
                loss, grads = elbo_loss(model, batch, rng)
            except VaeTrainingError as e:
                raise VaeTrainingError(f"Training diverged at epoch {epoch}: {e}", epoch=epoch) from e
            adam.step(model.params, grads)
            total += loss * batch.shape[0]
        epoch_loss = total / train.shape[0]
        if not np.isfinite(epoch_loss):
            raise VaeTrainingError(f"Training diverged at epoch {epoch}", epoch=epoch)
        history.append(epoch_loss)
        logger.debug(f"[VAE] epoch {epoch}: loss {epoch_loss:.6f}")

    model.check()
    val_rmse = reconstruction_rmse(model, val) if val.shape[0] else None
    if history:
        logger.info(f"[VAE] Final loss {history[-1]:.5f}, validation RMSE {val_rmse}")
    return TrainResult(model, history, val_rmse)


def checkpoint_files(directory: Path, model: VaeModel) -> List[Path]:
    directory = Path(directory)
    return [directory / WEIGHTS_DIR / f"{name}.npy" for name in sorted(model.params)] + [directory / "manifest.json"]


def save_checkpoint(directory: Path, result: TrainResult, cfg: TrainConfig):
    """manifest.json (shapes, d_z, config) + one .npy per parameter array (exact float64, no timestamps)"""
    directory = Path(directory)
    (directory / WEIGHTS_DIR).mkdir(parents=True, exist_ok=True)
    model = result.model
    for name, value in sorted(model.params.items()):
        np.save(directory / WEIGHTS_DIR / f"{name}.npy", value, allow_pickle=False)
    manifest = {
        "n_nodes": model.n_nodes,
        "hidden": model.hidden,
        "d_z": model.d_z,
        "seed": cfg.seed,
        "train_config": asdict(cfg),
        "shapes": {k: list(v.shape) for k, v in sorted(model.params.items())},
        "final_loss": result.loss_history[-1] if result.loss_history else None,
        "validation_rmse": result.validation_rmse,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: Path) -> VaeModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {}
    for name in manifest["shapes"]:
        path = directory / WEIGHTS_DIR / f"{name}.npy"
        if not path.exists():
            raise ModelCorruptError(f"Checkpoint array {name} is missing")
        params[name] = np.load(path, allow_pickle=False)
    for name, shape in manifest["shapes"].items():
        if list(params[name].shape) != shape:
            raise ModelCorruptError(f"Checkpoint array {name} has shape {params[name].shape}, manifest says {shape}")
    model = VaeModel(params, manifest["n_nodes"], manifest["hidden"], manifest["d_z"])
    model.check()
    return model
