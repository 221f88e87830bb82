"""Joint fine-tuning loop, Adam optimizer, metrics, and checkpoints.

One training step regenerates its batch of clips from their seeds,
runs encoder -> decoder -> losses per clip (detection masked on
no-change clips), averages per-task losses in batch order, combines
them with the learnable variance weighting, and applies one Adam
update. Batches follow a seeded Fisher-Yates shuffle per epoch with
any trailing partial batch dropped, so runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tl
from .decoder import (DecoderConfig, KeyframeSpec, TaskFusionDecoder,
                      TaskPredictions, argmax_first)
from .losses import (SigmaParams, TASK_ORDER, joint_loss, iou_giou_values,
                     make_pnr_target, match_queries, oscc_loss, pnr_loss,
                     scod_loss)
from .seeding import rng_for
from .synth import ClipRecord, Encoder, SynthClip, build_encoder
from .tensor import ContractError, ShapeError, Tensor, backward


class CheckpointError(Exception):
    """Checkpoint file is malformed or inconsistent with its header."""


class TrainingAbort(Exception):
    """Training hit a non-finite loss; carries the step and clip seed."""

    def __init__(self, step: int, clip_seed: int, task: str):
        self.step = step
        self.clip_seed = clip_seed
        self.task = task
        super().__init__(f"non-finite {task} loss at step {step} "
                         f"(clip seed {clip_seed})")


class ParamStore:
    """Ordered name -> tensor registry; iteration follows insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = t

    def add_module(self, prefix: str, params: dict[str, Tensor]) -> None:
        for name, t in params.items():
            self.register(f"{prefix}.{name}", t)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        for t in self._params.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


def save_checkpoint(store: ParamStore, path) -> None:
    """Header JSON line {name: {shape, byte_offset}}, then little-endian
    float64 payload in registry order."""
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, t in store.items():
        header[name] = {"shape": list(t.shape), "byte_offset": offset}
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> ParamStore:
    """Read a checkpoint back into a fresh store, verifying the payload."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from None
    expected = 0
    for name, meta in header.items():
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        if meta["byte_offset"] != expected:
            raise CheckpointError(f"parameter {name!r} at byte offset "
                                  f"{meta['byte_offset']}, expected {expected}")
        expected += n * 8
    if len(payload) != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, header "
                              f"requires {expected}")
    store = ParamStore()
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = meta["byte_offset"]
        arr = np.frombuffer(payload[start:start + n * 8], dtype="<f8")
        store.register(name, Tensor(arr.reshape(shape).copy(),
                                    requires_grad=True))
    return store


def copy_parameters(src: ParamStore, dst: ParamStore) -> None:
    """Copy values by name; any mismatch names the offending parameter."""
    src_names = set(src.names())
    for name, t in dst.items():
        if name not in src:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        value = src[name]
        if value.shape != t.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape "
                             f"{value.shape} != model shape {t.shape}")
        np.copyto(t.data, value.data)
        src_names.discard(name)
    if src_names:
        raise CheckpointError(f"checkpoint has unexpected parameters "
                              f"{sorted(src_names)[:3]}")


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are consumed (reset)."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in store.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    enabled_tasks: tuple[str, ...] = ("oscc", "pnr", "scod")
    seed: int = 0
    encoder: str = "per_frame_token"
    width: int = 64
    layers: int = 2
    dec_heads: int = 4
    enc_heads: int = 2
    mlp_hidden: int = 128
    patch: int = 8

    def __post_init__(self):
        self.enabled_tasks = tuple(self.enabled_tasks)
        unknown = set(self.enabled_tasks) - set(TASK_ORDER)
        if unknown:
            raise ContractError(f"unknown tasks {sorted(unknown)}")
        if not self.enabled_tasks:
            raise ContractError("enabled_tasks must be nonempty")


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: TaskFusionDecoder
    sigma: SigmaParams
    store: ParamStore

    @property
    def enabled_tasks(self) -> tuple[str, ...]:
        return self.decoder.config.enabled_tasks

    def predict(self, clip: SynthClip) -> TaskPredictions:
        features = self.encoder.encode(clip)
        if "pnr" in self.enabled_tasks:
            return self.decoder.infer(features)
        return self.decoder.decode(
            features, KeyframeSpec.train(None, no_change=True))


def build_model(config: TrainConfig, frames: int, image: int) -> ModelBundle:
    encoder = build_encoder(config.encoder, rng_for(config.seed, "init", "enc"),
                            width=config.width, heads=config.enc_heads,
                            frames=frames, image=image, patch=config.patch)
    dec_cfg = DecoderConfig(layers=config.layers, width=config.width,
                            heads=config.dec_heads, frames=frames,
                            patches=encoder.patches,
                            mlp_hidden=config.mlp_hidden,
                            enabled_tasks=config.enabled_tasks)
    decoder = TaskFusionDecoder(dec_cfg, rng_for(config.seed, "init", "dec"))
    sigma = SigmaParams.init()
    store = ParamStore()
    store.add_module("enc", encoder.parameters())
    store.add_module("dec", decoder.parameters())
    store.register("sigma.s", sigma.s)
    return ModelBundle(encoder=encoder, decoder=decoder, sigma=sigma,
                       store=store)


def fisher_yates(indices: list[int], rng: np.random.Generator) -> list[int]:
    order = list(indices)
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def _batches(n: int, batch_size: int, seed: int):
    """Endless batch index stream: seeded shuffle per epoch, partial batch
    at the epoch end dropped (whole epoch used when n < batch_size)."""
    size = min(batch_size, n)
    epoch = 0
    while True:
        order = fisher_yates(list(range(n)), rng_for(seed, "shuffle", epoch))
        for lo in range(0, n - size + 1, size):
            yield order[lo:lo + size]
        epoch += 1


@dataclass
class TrainResult:
    model: ModelBundle
    log: list[dict]
    config: TrainConfig


def _clip_losses(model: ModelBundle, clip: SynthClip,
                 enabled: tuple[str, ...]) -> dict[str, Tensor]:
    labels = clip.labels
    features = model.encoder.encode(clip)
    spec = KeyframeSpec.train(labels.pnr_frame, no_change=not labels.state_change)
    preds = model.decoder.decode(features, spec)
    out: dict[str, Tensor] = {}
    if "oscc" in enabled:
        out["oscc"] = oscc_loss(preds.oscc_logits, labels.state_change)
    if "pnr" in enabled:
        target = make_pnr_target(labels, clip.config.frames)
        out["pnr"] = pnr_loss(preds.pnr_logits, target)
    if "scod" in enabled and labels.state_change:
        out["scod"] = scod_loss(preds.scod, labels)
    return out


def train(records: list[ClipRecord], config: TrainConfig) -> TrainResult:
    if not records:
        raise ContractError("training dataset is empty")
    clip_cfg = records[0].config
    if clip_cfg.height != clip_cfg.width:
        raise ShapeError("training expects square rasters")
    model = build_model(config, frames=clip_cfg.frames, image=clip_cfg.height)
    adam = AdamState(lr=config.lr)
    batches = _batches(len(records), config.batch_size, config.seed)
    enabled = config.enabled_tasks
    log: list[dict] = []

    for step in range(1, config.steps + 1):
        batch = [records[i] for i in next(batches)]
        sums: dict[str, Tensor] = {}
        counts: dict[str, int] = {}
        for record in batch:
            clip = record.clip()
            per_clip = _clip_losses(model, clip, enabled)
            for task, value in per_clip.items():
                if not np.isfinite(value.item()):
                    raise TrainingAbort(step, record.seed, task)
                sums[task] = tl.add(sums[task], value) if task in sums else value
                counts[task] = counts.get(task, 0) + 1
        parts = {task: tl.scale(sums[task], 1.0 / counts[task])
                 for task in sums}
        present = tuple(t for t in enabled if t in parts)
        total = joint_loss(parts, model.sigma, present)
        if not np.isfinite(total.item()):
            raise TrainingAbort(step, batch[0].seed, "joint")
        backward(total)
        model.store.fill_missing_grads()
        adam_step(model.store, adam)

        sigma2 = model.sigma.sigma2()
        row = {"step": step, "loss_total": total.item()}
        for i, task in enumerate(TASK_ORDER):
            row[f"loss_{task}"] = (parts[task].item() if task in parts else None)
            row[f"sigma2_{i + 1}"] = (float(sigma2[i]) if task in enabled
                                      else None)
        log.append(row)
    return TrainResult(model=model, log=log, config=config)


@dataclass
class EvalReport:
    oscc_accuracy: float | None
    pnr_error_frames: float | None
    pnr_error_seconds: float | None
    scod_mean_iou: float | None
    loss_means: dict[str, float]
    clip_count: int

    def rows(self) -> list[tuple[str, float]]:
        out = []
        for name in ("oscc_accuracy", "pnr_error_frames", "pnr_error_seconds",
                     "scod_mean_iou"):
            value = getattr(self, name)
            if value is not None:
                out.append((name, value))
        for task, value in self.loss_means.items():
            out.append((f"loss_{task}", value))
        out.append(("clip_count", float(self.clip_count)))
        return out


def evaluate(model, records: list[ClipRecord]) -> EvalReport:
    """Metrics over a dataset: classification accuracy, keyframe error in
    frames and seconds, and mean IoU of matched detections.

    ``model`` needs ``predict(clip) -> TaskPredictions`` and
    ``enabled_tasks``; the keyframe for spatial predictions comes from the
    keyframe head's argmax (first index on ties).
    """
    if not records:
        raise ContractError("evaluation dataset is empty")
    enabled = model.enabled_tasks
    correct = 0
    frame_errors: list[float] = []
    ious: list[float] = []
    loss_sums: dict[str, float] = {}
    loss_counts: dict[str, int] = {}
    duration = records[0].config.clip_duration_seconds
    frames = records[0].config.frames

    def add_loss(task: str, value: float) -> None:
        loss_sums[task] = loss_sums.get(task, 0.0) + value
        loss_counts[task] = loss_counts.get(task, 0) + 1

    for record in records:
        clip = record.clip()
        labels = clip.labels
        preds = model.predict(clip)
        if "oscc" in enabled:
            predicted_change = argmax_first(preds.oscc_logits.data) == 0
            correct += int(predicted_change == labels.state_change)
            add_loss("oscc", oscc_loss(preds.oscc_logits,
                                       labels.state_change).item())
        if "pnr" in enabled:
            target = make_pnr_target(labels, frames)
            add_loss("pnr", pnr_loss(preds.pnr_logits, target).item())
            if labels.state_change:
                k = argmax_first(preds.pnr_logits.data)
                frame_errors.append(abs(k - labels.pnr_frame))
        if "scod" in enabled and labels.state_change:
            add_loss("scod", scod_loss(preds.scod, labels).item())
            match = match_queries(preds.scod, labels.boxes)
            for gt_i, q_j in match.pairs:
                iou, _ = iou_giou_values(preds.scod[q_j].box.data,
                                         labels.boxes[gt_i].box)
                ious.append(iou)

    n = len(records)
    mean_err = float(np.mean(frame_errors)) if frame_errors else None
    return EvalReport(
        oscc_accuracy=(correct / n if "oscc" in enabled else None),
        pnr_error_frames=mean_err,
        pnr_error_seconds=(mean_err * duration / frames
                           if mean_err is not None else None),
        scod_mean_iou=(float(np.mean(ious)) if ious else None),
        loss_means={t: loss_sums[t] / loss_counts[t] for t in loss_sums},
        clip_count=n,
    )
