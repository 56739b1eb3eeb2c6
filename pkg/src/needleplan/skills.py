"""Turn demonstrations into per-action expert densities.

Predicate-driven segmentation into the five action states, per-action
feature extraction with z-scoring, GMM fitting (k=3 by default), the
skill-chain builder, and the skill bundle file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import gmm
from .domain import (
    APPROACH_GATE, CONNECT_GATES, DONE, MOVE_TO_EXIT, MOTION_KINDS,
    PASS_THROUGH_GATE, ActionLabel, Demonstration, Level, NeedleState,
    TraceHistory, action_feature_rows, eval_predicates, feature_names,
)
from .errors import (
    ConfigurationError, InsufficientDataError, InvalidArgumentError,
    ParseError, SegmentationError,
)

BUNDLE_FORMAT = "skill-bundle"
BUNDLE_VERSION = 1

BOOL_JITTER_STD = 1e-2  # variance 1e-4, applied to boolean entries at fit time


@dataclass(frozen=True)
class FeatureSchema:
    """Entry names plus the z-scoring applied before density evaluation."""

    kind: str
    names: tuple
    z_mean: np.ndarray
    z_std: np.ndarray
    bool_mask: np.ndarray

    @property
    def dim(self):
        return len(self.names)

    def standardize(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.dim:
            raise InvalidArgumentError(
                f"feature rows have {rows.shape[1]} entries, schema expects {self.dim}")
        return (rows - self.z_mean) / self.z_std


@dataclass(frozen=True)
class SkillModel:
    """An action kind's expert density over its feature schema."""

    kind: str
    density: gmm.GmmModel
    schema: FeatureSchema

    def __post_init__(self):
        if self.density.dim != self.schema.dim:
            raise InvalidArgumentError("density dimension must equal schema length")

    def log_density_rows(self, raw_rows):
        """Expert log-likelihood of raw (unstandardized) feature rows."""
        return self.density.log_pdf_rows(self.schema.standardize(raw_rows))

    def raw_component_means(self):
        """Component means mapped back to raw feature units."""
        return np.stack([self.schema.z_mean + self.schema.z_std * c.mean
                         for c in self.density.components])


@dataclass(frozen=True)
class SkillChain:
    """Ordered (label, successor) pairs for one level; terminal is DONE."""

    elements: tuple

    def __len__(self):
        return len(self.elements)


@dataclass(frozen=True)
class Clip:
    """One contiguous same-action slice of a demonstration."""

    label: ActionLabel
    level: Level
    states: np.ndarray    # (m, 3) one row per step
    controls: np.ndarray  # (m, 2)
    start: int
    end: int              # exclusive state index in the source trace


def label_from_predicates(preds, history: TraceHistory) -> ActionLabel:
    """Map a predicate truth assignment to the active action."""
    if preds.at_exit:
        return ActionLabel(DONE)
    if preds.needle_in_gate is not None:
        return ActionLabel(PASS_THROUGH_GATE, (preds.needle_in_gate,))
    if all(preds.gate_closed):
        return ActionLabel(MOVE_TO_EXIT)
    next_open = preds.gate_open.index(True)
    if preds.has_prev_gate:
        return ActionLabel(CONNECT_GATES, (history.last_closed, next_open))
    return ActionLabel(APPROACH_GATE, (next_open,))


def segment(demo: Demonstration, level: Level):
    """Split a demonstration into contiguous (label, clip) pieces.

    Labels change exactly when the predicate assignment changes; the clips
    partition the trace.
    """
    if demo.level_id and level.level_id and demo.level_id != level.level_id:
        raise SegmentationError(
            f"demo references level {demo.level_id!r}, got {level.level_id!r}")
    try:
        demo.validate_dynamics()
    except ParseError as e:
        raise SegmentationError(str(e)) from e

    hist = TraceHistory(level)
    labels = []
    for i in range(demo.states.shape[0]):
        preds = eval_predicates(NeedleState(*demo.states[i]), level, hist)
        labels.append(label_from_predicates(preds, hist))

    clips = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            step_end = min(i, demo.n_steps)
            clips.append(Clip(
                label=labels[start], level=level,
                states=demo.states[start:step_end].copy(),
                controls=demo.controls[start:step_end].copy(),
                start=start, end=i))
            start = i
    return clips


def clip_feature_rows(clip: Clip):
    if clip.states.shape[0] == 0:
        return np.zeros((0, len(feature_names(clip.label))))
    return action_feature_rows(clip.states, clip.controls, clip.level, clip.label)


def clip_training_rows(clip: Clip):
    """Rows used for density fitting: the clip-start row is dropped because
    its differences are zero by convention, not by demonstrated motion;
    keeping those rows plants a spurious density spike at the frozen pose."""
    return clip_feature_rows(clip)[1:]


def train_skill(clips, kind, cfg: gmm.FitConfig) -> SkillModel:
    """Pool an action kind's clips, z-score the rows, and fit the GMM.

    Boolean entries get N(0, 1e-4) jitter at fit time only so constant
    flags cannot produce singular covariances.
    """
    if kind not in MOTION_KINDS:
        raise InvalidArgumentError(f"no density is trained for action kind {kind!r}")
    rows = [clip_training_rows(c) for c in clips if c.label.kind == kind]
    rows = [r for r in rows if r.shape[0]]
    if not rows:
        raise InsufficientDataError(f"no feature rows for action {kind}")
    X = np.concatenate(rows, axis=0)
    names = tuple(feature_names(clips_kind_label(clips, kind)))
    d = X.shape[1]
    if X.shape[0] < cfg.k * (d + 1):
        raise InsufficientDataError(
            f"action {kind}: need {cfg.k * (d + 1)} rows for k={cfg.k}, d={d}; got {X.shape[0]}")

    z_mean = X.mean(axis=0)
    z_std = X.std(axis=0)
    z_std = np.where(z_std < 1e-12, 1.0, z_std)
    bool_mask = np.array([n == "in_tissue" for n in names])
    schema = FeatureSchema(kind, names, z_mean, z_std, bool_mask)

    Z = schema.standardize(X)
    rng = np.random.default_rng((cfg.seed, MOTION_KINDS.index(kind)))
    Z[:, bool_mask] += rng.normal(0.0, BOOL_JITTER_STD, size=(Z.shape[0], int(bool_mask.sum())))
    model = gmm.fit_em(Z, cfg)
    return SkillModel(kind, model, schema)


def clips_kind_label(clips, kind):
    for c in clips:
        if c.label.kind == kind:
            return c.label
    raise InsufficientDataError(f"no clips for action {kind}")


@dataclass
class SkillBundle:
    """All trained skills plus the fit configuration that produced them."""

    skills: dict
    fit: gmm.FitConfig

    def require(self, kind) -> SkillModel:
        if kind not in self.skills:
            raise ConfigurationError(f"skill bundle is missing action kind {kind}")
        return self.skills[kind]


def train_bundle(demos_and_levels, cfg: gmm.FitConfig) -> SkillBundle:
    """Segment every (demo, level) pair and train one skill per motion kind."""
    clips = []
    for demo, level in demos_and_levels:
        clips.extend(segment(demo, level))
    if not clips:
        raise InsufficientDataError("no demonstrations to train from")
    skills = {}
    for kind in MOTION_KINDS:
        skills[kind] = train_skill(clips, kind, cfg)
    return SkillBundle(skills=skills, fit=cfg)


def build_chain(level: Level, bundle: SkillBundle | None = None) -> SkillChain:
    """APPROACH(0), PASS(0), CONNECT(0,1), PASS(1), ..., MOVE_TO_EXIT, DONE."""
    n = len(level.gates)
    if n < 1:
        raise InvalidArgumentError("level has no gates")
    labels = [ActionLabel(APPROACH_GATE, (0,)), ActionLabel(PASS_THROUGH_GATE, (0,))]
    for i in range(1, n):
        labels.append(ActionLabel(CONNECT_GATES, (i - 1, i)))
        labels.append(ActionLabel(PASS_THROUGH_GATE, (i,)))
    labels.append(ActionLabel(MOVE_TO_EXIT))
    labels.append(ActionLabel(DONE))
    if bundle is not None:
        for lab in labels:
            if lab.kind != DONE:
                bundle.require(lab.kind)
    elems = tuple((labels[i], labels[i + 1] if i + 1 < len(labels) else None)
                  for i in range(len(labels)))
    return SkillChain(elements=elems)


# ---------------------------------------------------------------------------
# Bundle file format
# ---------------------------------------------------------------------------

def _hex_list(a):
    return [float(v).hex() for v in np.asarray(a, dtype=float).reshape(-1)]


def _unhex_array(lst, fieldname):
    try:
        return np.array([float.fromhex(s) for s in lst])
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad float in field '{fieldname}'", field=fieldname) from e


def bundle_to_dict(bundle: SkillBundle):
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "fit": {"k": bundle.fit.k, "max_iters": bundle.fit.max_iters,
                "loglik_tol": bundle.fit.loglik_tol, "cov_floor": bundle.fit.cov_floor,
                "seed": bundle.fit.seed},
        "skills": {
            kind: {
                "schema": {
                    "names": list(s.schema.names),
                    "z_mean": _hex_list(s.schema.z_mean),
                    "z_std": _hex_list(s.schema.z_std),
                    "bool_mask": [bool(b) for b in s.schema.bool_mask],
                },
                "model": gmm.model_to_dict(s.density),
            }
            for kind, s in bundle.skills.items()
        },
    }


def bundle_from_dict(obj) -> SkillBundle:
    for key in ("format", "version", "fit", "skills"):
        if key not in obj:
            raise ParseError(f"missing field '{key}' in skill bundle", field=key)
    if obj["format"] != BUNDLE_FORMAT:
        raise ParseError(f"unexpected format {obj['format']!r}", field="format")
    if obj["version"] != BUNDLE_VERSION:
        raise ParseError(f"unsupported bundle version {obj['version']!r}", field="version")
    fit = gmm.FitConfig(**obj["fit"])
    skills = {}
    for kind, entry in obj["skills"].items():
        sch = entry.get("schema")
        if sch is None:
            raise ParseError(f"skill {kind} missing schema", field="schema")
        names = tuple(sch["names"])
        schema = FeatureSchema(
            kind=kind,
            names=names,
            z_mean=_unhex_array(sch["z_mean"], "z_mean"),
            z_std=_unhex_array(sch["z_std"], "z_std"),
            bool_mask=np.array(sch["bool_mask"], dtype=bool),
        )
        model = gmm.model_from_dict(entry["model"])
        skills[kind] = SkillModel(kind, model, schema)
    return SkillBundle(skills=skills, fit=fit)


def save_bundle(bundle: SkillBundle, path):
    with open(path, "w") as f:
        json.dump(bundle_to_dict(bundle), f, indent=1)
        f.write("\n")


def load_bundle(path) -> SkillBundle:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
    return bundle_from_dict(obj)
