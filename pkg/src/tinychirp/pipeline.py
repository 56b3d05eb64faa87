"""The two-stage screening strategy over 3-second segments.

Step 1 (gate): normalize, high-pass, compare signal power against t_low;
below it the segment is discarded with the MCU still idle. Step 2: with
power saving enabled, power at or above t_high stores the segment
outright (the model can only burn energy to confirm); otherwise the
classifier scores the segment against t_model. Step 3: surviving
segments are written to the sink.

Variants: baseline_only (gate decides alone), skip_baseline (model on
everything), full (gate then model), power_saving (gate, t_high
shortcut, then model).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import audio_io, budget, dsp, nn_core, quantization, weights_io
from .audio_io import (
    NON_TARGET,
    TARGET,
    AudioSegment,
    load_manifest,
    read_wav,
    write_segment_wav,
)
from .budget import (
    BASELINE_ONLY,
    DISCARDED_BY_MODEL,
    DISCARDED_IDLE,
    FULL,
    POWER_SAVING,
    SKIP_BASELINE,
    STORED_AFTER_MODEL,
    STORED_DIRECT,
    NRF52840DK,
    EnergyTable,
)

MODEL_NONE = "none"
CNN_TIME = "cnn_time"
TRANSFORMER_TIME = "transformer_time"
CNN_MEL = "cnn_mel"
MODEL_CHOICES = (MODEL_NONE, CNN_TIME, TRANSFORMER_TIME, CNN_MEL)

# Gate thresholds and per-model decision thresholds tuned for the
# recall-weighted F2 objective; shipped as defaults.
DEFAULT_T_LOW = 1.00e-7
DEFAULT_T_HIGH = 1.29e-5
DEFAULT_MODEL_THRESHOLDS = {CNN_TIME: 0.23, TRANSFORMER_TIME: 0.27, CNN_MEL: 0.27}


class PipelineError(Exception):
    pass


class ModelMissing(PipelineError):
    pass


class SinkFailure(PipelineError):
    pass


@dataclass(frozen=True)
class ScreeningConfig:
    variant: str = FULL
    t_low: float = DEFAULT_T_LOW
    t_high: float = DEFAULT_T_HIGH
    model_choice: str = MODEL_NONE
    t_model: float = 0.5

    def __post_init__(self):
        if self.variant not in budget.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.model_choice not in MODEL_CHOICES:
            raise ValueError(f"unknown model {self.model_choice!r}")
        if not 0.0 < self.t_low <= self.t_high:
            raise ValueError("need 0 < t_low <= t_high")
        if not 0.0 <= self.t_model <= 1.0:
            raise ValueError("t_model must be in [0, 1]")
        if self.variant != BASELINE_ONLY and self.model_choice == MODEL_NONE:
            raise ValueError(f"variant {self.variant!r} needs a model")

    @property
    def power_saving(self) -> bool:
        return self.variant == POWER_SAVING


@dataclass(frozen=True)
class ScreeningOutcome:
    verdict: str
    power: Optional[dsp.PowerReading]
    model_score: Optional[float]
    stage_trace: tuple
    energy_mj: float
    stored_path: Optional[str] = None


@dataclass
class ModelBundle:
    """A built graph plus either float weights or a calibrated int8 model."""

    choice: str
    graph: nn_core.ModelGraph
    weights: Optional[nn_core.WeightSet] = None
    qmodel: Optional[quantization.QuantModel] = None

    @property
    def quantized(self) -> bool:
        return self.qmodel is not None

    def score(self, segment: AudioSegment) -> float:
        """Probability that the target song is present."""
        x = model_input(self.choice, segment)
        if self.qmodel is not None:
            probs = quantization.quantized_forward(self.qmodel, x)
        elif self.weights is not None:
            probs = nn_core.forward(self.graph, self.weights, x)
        else:
            raise ModelMissing(f"bundle for {self.choice!r} carries no weights")
        return float(probs[nn_core.TARGET_CLASS])


def build_model(choice: str, input_length: int = 48000) -> nn_core.ModelGraph:
    if choice == CNN_TIME:
        return nn_core.build_cnn_time(input_length)
    if choice == TRANSFORMER_TIME:
        return nn_core.build_transformer_time(input_length)
    if choice == CNN_MEL:
        return nn_core.build_cnn_mel()
    raise ModelMissing(f"no graph for model choice {choice!r}")


def model_input(choice: str, segment: AudioSegment) -> np.ndarray:
    """Time-series models eat the raw segment; the mel model eats log-mel."""
    if choice in (CNN_TIME, TRANSFORMER_TIME):
        return segment.samples[np.newaxis, :]
    if choice == CNN_MEL:
        mel = dsp.log_mel(dsp.stft_magnitude(segment), _mel_filterbank())
        return mel.values[np.newaxis, :, :]
    raise ModelMissing(f"no input mapping for model choice {choice!r}")


def load_bundle(
    choice: str,
    weights_path=None,
    seed: int = 0,
    quantized: bool = False,
    input_length: int = 48000,
) -> ModelBundle:
    """Build a graph and attach weights from a container (or a seeded fill)."""
    graph = build_model(choice, input_length)
    if weights_path is None:
        return ModelBundle(choice, graph, weights=nn_core.seeded_init(graph, seed))
    if quantized:
        return ModelBundle(
            choice, graph, qmodel=quantization.load_quant_model(graph, weights_path)
        )
    return ModelBundle(choice, graph, weights=weights_io.load_weights(graph, weights_path))


@lru_cache(maxsize=8)
def _gate_filter(sample_rate: int) -> dsp.FilterSOS:
    return dsp.design_butterworth_highpass(
        dsp.HIGHPASS_ORDER, dsp.HIGHPASS_CUTOFF_HZ, sample_rate
    )


@lru_cache(maxsize=1)
def _mel_filterbank() -> np.ndarray:
    return dsp.mel_filterbank()


def gate_power(segment: AudioSegment) -> dsp.PowerReading:
    """Signal power of the normalized, high-passed copy of a segment."""
    filtered = dsp.filter_apply(_gate_filter(segment.sample_rate), dsp.minmax_normalize(segment))
    return dsp.signal_power(filtered)


class WavSink:
    """Writes stored segments as ``<source_stem>_<offset_ms>.wav``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def store(self, segment: AudioSegment) -> str:
        stem = Path(segment.source_id).stem or "segment"
        name = f"{stem}_{int(round(segment.offset_s * 1000))}.wav"
        path = self.directory / name
        try:
            write_segment_wav(segment, path)
        except OSError as exc:  # pragma: no cover - disk-level failure
            raise SinkFailure(str(exc)) from exc
        return str(path)


def screen_segment(
    segment: AudioSegment,
    cfg: ScreeningConfig,
    model_bundle: Optional[ModelBundle] = None,
    sink=None,
    energy_table: EnergyTable = NRF52840DK,
) -> ScreeningOutcome:
    """Run the decision strategy on one segment.

    The gate chain runs on a copy; whatever gets stored is the original,
    unnormalized audio. Energy is attributed from the per-stage cost
    table, not measured.
    """
    trace: List[str] = []
    power = None
    score = None

    baseline_ran = cfg.variant != SKIP_BASELINE
    if baseline_ran:
        trace.append("baseline_gate")
        power = gate_power(segment)
        if power.p < cfg.t_low:
            return _outcome(DISCARDED_IDLE, power, score, trace, cfg, energy_table)

    if cfg.variant == BASELINE_ONLY:
        stored = _store(segment, sink, trace)
        return _outcome(STORED_DIRECT, power, score, trace, cfg, energy_table, stored)

    if cfg.power_saving and power is not None and power.p >= cfg.t_high:
        # Powerful signal: storing is cheaper than asking the model.
        stored = _store(segment, sink, trace)
        return _outcome(STORED_DIRECT, power, score, trace, cfg, energy_table, stored)

    if model_bundle is None or model_bundle.choice != cfg.model_choice:
        raise ModelMissing(
            f"config wants {cfg.model_choice!r}, bundle has "
            f"{getattr(model_bundle, 'choice', None)!r}"
        )
    trace.append("model_inference")
    score = model_bundle.score(segment)
    if score < cfg.t_model:
        return _outcome(DISCARDED_BY_MODEL, power, score, trace, cfg, energy_table)
    stored = _store(segment, sink, trace)
    return _outcome(STORED_AFTER_MODEL, power, score, trace, cfg, energy_table, stored)


def _store(segment, sink, trace) -> Optional[str]:
    trace.append("storage")
    if sink is None:
        return None
    return sink.store(segment)


def _outcome(verdict, power, score, trace, cfg, table, stored_path=None):
    energy = 0.0
    if "baseline_gate" in trace:
        energy += table.cost("baseline").energy_total_mj
    if "model_inference" in trace:
        energy += table.cost(cfg.model_choice).energy_total_mj
    return ScreeningOutcome(
        verdict=verdict,
        power=power,
        model_score=score,
        stage_trace=tuple(trace),
        energy_mj=energy,
        stored_path=stored_path,
    )


@dataclass
class SessionReport:
    config: dict
    counts: Dict[str, int]
    energy_mj_total: float
    per_segment: List[dict]
    confusion: Optional[dict] = None
    errors: List[dict] = field(default_factory=list)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(asdict(self), indent=indent)


def run_pipeline(
    source,
    cfg: ScreeningConfig,
    sink_dir=None,
    model_bundle: Optional[ModelBundle] = None,
    energy_table: EnergyTable = NRF52840DK,
    segment_duration_s: float = 3.0,
    analysis_rate: int = dsp.ANALYSIS_RATE_HZ,
    jobs: int = 1,
) -> SessionReport:
    """Screen every WAV under a directory or listed in a manifest CSV.

    One broken file is recorded and skipped; it never aborts the run.
    Results are merged in sorted source order, so reports are identical
    regardless of ``jobs``.
    """
    source = Path(source)
    if source.is_dir():
        files = [(str(p), None) for p in sorted(source.glob("*.wav"))]
    else:
        manifest = load_manifest(source)
        files = [(e.path, e.label) for e in manifest]

    sink = WavSink(sink_dir) if sink_dir is not None else None

    def process(item):
        path, label = item
        try:
            signal = read_wav(path).to_mono()
            if signal.sample_rate != analysis_rate:
                signal = dsp.downsample_zoh(signal, analysis_rate)
            segments = [
                AudioSegment(
                    samples=s.samples,
                    sample_rate=s.sample_rate,
                    label=label,
                    source_id=path,
                    offset_s=s.offset_s,
                )
                for s in audio_io.segment(signal, segment_duration_s, source_id=path)
            ]
            results = []
            for seg in segments:
                out = screen_segment(seg, cfg, model_bundle, sink, energy_table)
                results.append((seg, out))
            return path, results, None
        except Exception as exc:
            return path, [], f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            processed = list(pool.map(process, files))
    else:
        processed = [process(item) for item in files]
    processed.sort(key=lambda r: r[0])

    counts = {v: 0 for v in budget.VERDICTS}
    per_segment = []
    errors = []
    energy = 0.0
    labeled = []
    for path, results, err in processed:
        if err is not None:
            errors.append({"source": path, "error": err})
            continue
        for seg, out in results:
            counts[out.verdict] += 1
            energy += out.energy_mj
            record = {
                "source": seg.source_id,
                "offset_s": seg.offset_s,
                "verdict": out.verdict,
                "power": None if out.power is None else out.power.p,
            }
            if out.model_score is not None:
                record["score"] = out.model_score
            per_segment.append(record)
            if seg.label is not None:
                stored = out.verdict in (STORED_DIRECT, STORED_AFTER_MODEL)
                labeled.append((stored, seg.label))

    confusion = None
    if labeled:
        confusion = {
            "tp": sum(1 for s, lab in labeled if s and lab == TARGET),
            "fp": sum(1 for s, lab in labeled if s and lab == NON_TARGET),
            "tn": sum(1 for s, lab in labeled if not s and lab == NON_TARGET),
            "fn": sum(1 for s, lab in labeled if not s and lab == TARGET),
        }

    return SessionReport(
        config=asdict(cfg),
        counts=counts,
        energy_mj_total=energy,
        per_segment=per_segment,
        confusion=confusion,
        errors=errors,
    )
