"""The five compared architectures.

=========================  ==========================================
architecture               inputs
=========================  ==========================================
single_catchment           shared variables + discharge, one model per catchment
multi_catchment_no_q       shared variables
multi_catchment_with_q     shared variables + discharge
flag                       shared + discharge (placeholder when absent) + flag
hydra                      body: shared; heads: encoding (+ extra variables)
=========================  ==========================================

"Shared" variables are those available at every catchment (dynamic drivers
and static attributes repeated through time). All models output the
(q10, q50, q90) of next-day discharge in normalized target space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .data import DISCHARGE, PLACEHOLDER, ConfigurationError, FlagAugmentedInput
from .recurrent import (
    LstmStack,
    Projection,
    assign_parameters,
    load_parameters,
    save_parameters,
)

ARCHITECTURES = (
    "single_catchment",
    "multi_catchment_no_q",
    "multi_catchment_with_q",
    "flag",
    "hydra",
)


@dataclass(frozen=True)
class Hyperparameters:
    hidden_size: int
    num_layers: int
    learning_rate: float
    dropout: float
    head_hidden_size: int | None = None
    head_num_layers: int | None = None

    def label(self) -> str:
        s = f"h{self.hidden_size}x{self.num_layers}"
        if self.head_hidden_size is not None:
            s += f"_head{self.head_hidden_size}x{self.head_num_layers}"
        return s + f"_lr{self.learning_rate:g}_do{self.dropout:g}"


# Hyperparameter search grids; bidirectional variants are not offered.
SEARCH_GRIDS: dict[str, dict[str, list]] = {
    "single_catchment": {
        "hidden_size": [16, 64, 128],
        "num_layers": [1, 2, 3],
        "learning_rate": [1e-3, 1e-5],
        "dropout": [0.0, 0.1, 0.4],
    },
    "multi_catchment_no_q": {
        "hidden_size": [64, 128, 256],
        "num_layers": [1, 2, 3],
        "learning_rate": [1e-3, 1e-5],
        "dropout": [0.0, 0.2, 0.4],
    },
    "multi_catchment_with_q": {
        "hidden_size": [64, 128, 256],
        "num_layers": [1, 2, 3],
        "learning_rate": [1e-3, 1e-5],
        "dropout": [0.0, 0.2, 0.4],
    },
    "flag": {
        "hidden_size": [64, 128, 256],
        "num_layers": [1, 2, 3],
        "learning_rate": [1e-3, 1e-5],
        "dropout": [0.0, 0.2, 0.4],
    },
    "hydra": {
        "hidden_size": [64, 128, 256],
        "num_layers": [1, 2, 3],
        "head_hidden_size": [16, 32, 64],
        "head_num_layers": [1, 2],
        "learning_rate": [1e-3, 1e-5],
        "dropout": [0.0, 0.2, 0.4],
    },
}

# Selected (bold) settings from the same table.
DEFAULT_HYPERPARAMETERS: dict[str, Hyperparameters] = {
    "single_catchment": Hyperparameters(128, 1, 1e-3, 0.0),
    "multi_catchment_no_q": Hyperparameters(128, 2, 1e-3, 0.2),
    "multi_catchment_with_q": Hyperparameters(128, 2, 1e-3, 0.2),
    "flag": Hyperparameters(128, 2, 1e-3, 0.2),
    "hydra": Hyperparameters(128, 2, 1e-3, 0.0, head_hidden_size=32, head_num_layers=1),
}


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    hyperparameters: Hyperparameters | None = None
    seed: int = 0
    # extra variables fed to single-catchment heads, or the optional
    # variables of the flag model
    extra_variables: tuple[str, ...] = (DISCHARGE,)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        if self.hyperparameters is None:
            object.__setattr__(
                self, "hyperparameters", DEFAULT_HYPERPARAMETERS[self.architecture]
            )
        hp = self.hyperparameters
        if self.architecture == "hydra" and hp.head_hidden_size is None:
            object.__setattr__(
                self,
                "hyperparameters",
                replace(hp, head_hidden_size=32, head_num_layers=hp.head_num_layers or 1),
            )

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "hyperparameters": asdict(self.hyperparameters),
            "seed": self.seed,
            "extra_variables": list(self.extra_variables),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> ModelSpec:
        hp = doc.get("hyperparameters")
        return cls(
            doc["architecture"],
            Hyperparameters(**hp) if hp else None,
            int(doc.get("seed", 0)),
            tuple(doc.get("extra_variables", (DISCHARGE,))),
        )


def declared_inputs(
    architecture: str, shared: Sequence[str], optional: Sequence[str] = (DISCHARGE,)
) -> tuple[str, ...]:
    """Input roster of a single-stack architecture, in feature order."""
    shared = tuple(n for n in shared if n not in optional and n != DISCHARGE)
    if architecture == "multi_catchment_no_q":
        return shared
    if architecture in ("multi_catchment_with_q", "single_catchment"):
        return shared + (DISCHARGE,)
    if architecture == "flag":
        return shared + tuple(optional) + tuple(f"{v}_flag" for v in optional)
    raise ConfigurationError(f"{architecture!r} is not a single-stack architecture")


def _stack_and_projection(n_in, hidden, layers, dropout, rng):
    stack = LstmStack.initialize(n_in, [hidden] * layers, rng, dropout=dropout)
    return stack, Projection.initialize(hidden, rng)


def _last_step(seq: Tensor) -> Tensor:
    return ad.take(seq, -1)


class QuantileLstm:
    """A single LSTM stack plus quantile projection (every baseline)."""

    def __init__(
        self,
        architecture: str,
        input_names: Sequence[str],
        stack: LstmStack,
        projection: Projection,
        catchment_id: str | None = None,
    ):
        self.architecture = architecture
        self.input_names = tuple(input_names)
        self.stack = stack
        self.projection = projection
        self.catchment_id = catchment_id
        if stack.input_size != len(self.input_names):
            raise DimensionError(
                f"stack expects {stack.input_size} inputs, roster has {len(self.input_names)}"
            )

    @classmethod
    def build(
        cls,
        architecture: str,
        input_names: Sequence[str],
        hp: Hyperparameters,
        rng: np.random.Generator,
        catchment_id: str | None = None,
    ):
        stack, proj = _stack_and_projection(
            len(input_names), hp.hidden_size, hp.num_layers, hp.dropout, rng
        )
        return cls(architecture, input_names, stack, proj, catchment_id)

    @property
    def prefix(self) -> str:
        return f"model.{self.catchment_id}" if self.catchment_id else "model"

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.stack.named_parameters(f"{self.prefix}.lstm")
        out.update(self.projection.named_parameters(f"{self.prefix}.proj"))
        return out

    def train(self, mode: bool = True) -> None:
        self.stack.training = mode

    def check_inputs(self, names: Sequence[str]) -> None:
        names = tuple(names)
        if self.architecture == "multi_catchment_no_q" and DISCHARGE in names:
            raise ConfigurationError("multi_catchment_no_q does not accept discharge as an input")
        if names != self.input_names:
            extra = sorted(set(names) - set(self.input_names))
            lacking = sorted(set(self.input_names) - set(names))
            raise ConfigurationError(
                f"{self.architecture}: input variables do not match the declared set "
                f"(unexpected {extra}, missing {lacking})"
            )

    def forward(self, inputs: Tensor, rng=None) -> Tensor:
        seq = self.stack.run_sequence(inputs, rng)
        return self.projection(_last_step(seq))


class FlagLstm(QuantileLstm):
    def __init__(self, input_names, stack, projection, optional_names: Sequence[str]):
        super().__init__("flag", input_names, stack, projection)
        self.optional_names = tuple(optional_names)

    @classmethod
    def build_flag(cls, shared, optional, hp: Hyperparameters, rng):
        names = declared_inputs("flag", shared, optional)
        stack, proj = _stack_and_projection(len(names), hp.hidden_size, hp.num_layers, hp.dropout, rng)
        return cls(names, stack, proj, optional)


def baseline_forward(
    model: QuantileLstm, inputs: Tensor, input_names: Sequence[str] | None = None, rng=None
) -> Tensor:
    """Run a single-stack model after checking its variable contract."""
    if input_names is not None:
        model.check_inputs(input_names)
    if inputs.shape[-1] != len(model.input_names):
        raise DimensionError(
            f"{model.architecture}: got {inputs.shape[-1]} features, expected {len(model.input_names)}"
        )
    return model.forward(inputs, rng)


def flag_forward(model: FlagLstm, inputs: FlagAugmentedInput, rng=None) -> Tensor:
    inputs.validate()
    if inputs.optional.shape[-1] != len(model.optional_names):
        raise DimensionError(
            f"flag model expects {len(model.optional_names)} optional variables, "
            f"got {inputs.optional.shape[-1]}"
        )
    return baseline_forward(model, Tensor(inputs.features()), rng=rng)


# ---------------------------------------------------------------- Hydra


class HydraBody:
    def __init__(self, stack: LstmStack, input_names: Sequence[str]):
        self.stack = stack
        self.input_names = tuple(input_names)
        if DISCHARGE in self.input_names:
            raise ConfigurationError("the Hydra body only takes variables shared by all catchments")
        if stack.input_size != len(self.input_names):
            raise DimensionError(
                f"body stack expects {stack.input_size} inputs, roster has {len(self.input_names)}"
            )

    @property
    def hidden_size(self) -> int:
        return self.stack.hidden_size

    def encode(self, shared_inputs: Tensor, rng=None) -> Tensor:
        """Encoding time series, same leading layout as the input."""
        return self.stack.run_sequence(shared_inputs, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.stack.named_parameters("body")


class MultiCatchmentHead:
    def __init__(self, stack: LstmStack, projection: Projection):
        self.stack = stack
        self.projection = projection

    extra_variable_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "head") -> dict[str, Tensor]:
        out = self.stack.named_parameters(prefix)
        out.update(self.projection.named_parameters(f"{prefix}.proj"))
        return out


class SingleCatchmentHead(MultiCatchmentHead):
    def __init__(
        self,
        catchment_id: str,
        stack: LstmStack,
        projection: Projection,
        extra_variable_names: Sequence[str],
    ):
        super().__init__(stack, projection)
        self.catchment_id = catchment_id
        self.extra_variable_names = tuple(extra_variable_names)

    def named_parameters(self, prefix: str | None = None) -> dict[str, Tensor]:
        return super().named_parameters(prefix or f"heads.{self.catchment_id}")


def build_head(
    body_hidden: int,
    hp: Hyperparameters,
    rng: np.random.Generator,
    catchment_id: str | None = None,
    extra_variable_names: Sequence[str] = (),
):
    n_in = body_hidden + len(extra_variable_names)
    stack, proj = _stack_and_projection(
        n_in, hp.head_hidden_size, hp.head_num_layers, hp.dropout, rng
    )
    if catchment_id is None:
        return MultiCatchmentHead(stack, proj)
    return SingleCatchmentHead(catchment_id, stack, proj, extra_variable_names)


def head_forward(head: MultiCatchmentHead, encoding: Tensor, extra_inputs=None, rng=None) -> Tensor:
    """Apply a head to a body encoding, concatenating extra inputs on the feature axis."""
    single = isinstance(head, SingleCatchmentHead)
    if extra_inputs is not None and not single:
        raise ConfigurationError("the multi-catchment head does not accept extra inputs")
    if single:
        if extra_inputs is None:
            raise ConfigurationError(
                f"single-catchment head {head.catchment_id!r} needs its extra inputs "
                f"{list(head.extra_variable_names)}"
            )
        extra = extra_inputs if isinstance(extra_inputs, Tensor) else Tensor(extra_inputs)
        if extra.shape[-1] != len(head.extra_variable_names):
            raise DimensionError(
                f"head expects {len(head.extra_variable_names)} extra variables, "
                f"got {extra.shape[-1]}"
            )
        if extra.shape[:-1] != encoding.shape[:-1]:
            raise DimensionError(
                f"extra inputs {extra.shape} are not aligned with the encoding {encoding.shape}"
            )
        encoding = ad.concat([encoding, extra], axis=-1)
    if encoding.shape[-1] != head.stack.input_size:
        raise DimensionError(
            f"head expects {head.stack.input_size} features, got {encoding.shape[-1]}"
        )
    seq = head.stack.run_sequence(encoding, rng)
    return head.projection(_last_step(seq))


def hydra_forward(
    body: HydraBody,
    head: MultiCatchmentHead,
    shared_inputs: Tensor,
    extra_inputs: Tensor | np.ndarray | None = None,
    rng=None,
) -> Tensor:
    if extra_inputs is not None and not isinstance(head, SingleCatchmentHead):
        raise ConfigurationError("the multi-catchment head does not accept extra inputs")
    if shared_inputs.shape[0] < 1:
        raise DimensionError("hydra_forward needs at least one timestep")
    if shared_inputs.shape[-1] != body.stack.input_size:
        raise DimensionError(
            f"body expects {body.stack.input_size} features, got {shared_inputs.shape[-1]}"
        )
    if not isinstance(rng, (np.random.Generator, type(None))):
        rng = np.random.default_rng(rng)
    encoding = body.encode(shared_inputs, rng)
    return head_forward(head, encoding, extra_inputs, rng)


class HydraModel:
    def __init__(
        self,
        body: HydraBody,
        multi_head: MultiCatchmentHead,
        single_heads: Mapping[str, SingleCatchmentHead] | None = None,
    ):
        self.body = body
        self.multi_head = multi_head
        self.single_heads: dict[str, SingleCatchmentHead] = dict(single_heads or {})
        self.phase1_complete = False

    architecture = "hydra"

    @classmethod
    def build(cls, shared_names, hp: Hyperparameters, rng: np.random.Generator):
        body_stack = LstmStack.initialize(
            len(shared_names), [hp.hidden_size] * hp.num_layers, rng, dropout=hp.dropout
        )
        body = HydraBody(body_stack, shared_names)
        return cls(body, build_head(hp.hidden_size, hp, rng))

    def train(self, mode: bool = True) -> None:
        self.body.stack.training = mode
        self.multi_head.stack.training = mode
        for h in self.single_heads.values():
            h.stack.training = mode

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.body.named_parameters()
        out.update(self.multi_head.named_parameters("head"))
        for cid in sorted(self.single_heads):
            out.update(self.single_heads[cid].named_parameters())
        return out


# ---------------------------------------------------------------- persistence


def _module_parameters(model) -> dict[str, dict[str, Tensor]]:
    """Checkpoint file name -> parameters stored in it."""
    if isinstance(model, HydraModel):
        out = {"body": model.body.named_parameters(), "multi_head": model.multi_head.named_parameters("head")}
        for cid, head in sorted(model.single_heads.items()):
            out[f"head_{cid}"] = head.named_parameters()
        return out
    if isinstance(model, dict):  # single-catchment ensemble
        return {f"model_{cid}": m.named_parameters() for cid, m in sorted(model.items())}
    return {"model": model.named_parameters()}


def save_checkpoints(model, directory: str | Path) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, params in _module_parameters(model).items():
        save_parameters(directory / f"{name}.json", params)
        names.append(f"{name}.json")
    return names


def load_checkpoints(model, directory: str | Path) -> None:
    directory = Path(directory)
    for name, params in _module_parameters(model).items():
        assign_parameters(params, load_parameters(directory / f"{name}.json"))


def model_manifest(model, spec: ModelSpec, extra: Mapping | None = None) -> dict:
    """Everything needed to rebuild ``model`` before loading its checkpoints."""
    doc: dict = {"spec": spec.to_dict()}
    if isinstance(model, HydraModel):
        doc["body_inputs"] = list(model.body.input_names)
        doc["single_heads"] = {
            cid: list(h.extra_variable_names) for cid, h in sorted(model.single_heads.items())
        }
    elif isinstance(model, dict):
        doc["inputs"] = list(next(iter(model.values())).input_names)
        doc["catchments"] = sorted(model)
    else:
        doc["inputs"] = list(model.input_names)
        if isinstance(model, FlagLstm):
            doc["optional"] = list(model.optional_names)
    if extra:
        doc.update(extra)
    return doc


def model_from_manifest(doc: Mapping):
    """Rebuild an (untrained) model with the manifest's shapes."""
    spec = ModelSpec.from_dict(doc["spec"])
    hp = spec.hyperparameters
    rng = np.random.default_rng(0)
    if spec.architecture == "hydra":
        model = HydraModel.build(doc["body_inputs"], hp, rng)
        for cid, extras in doc.get("single_heads", {}).items():
            model.single_heads[cid] = build_head(hp.hidden_size, hp, rng, cid, extras)
        model.phase1_complete = True
        return model
    if spec.architecture == "single_catchment":
        return {
            cid: QuantileLstm.build("single_catchment", doc["inputs"], hp, rng, cid)
            for cid in doc["catchments"]
        }
    if spec.architecture == "flag":
        names = doc["inputs"]
        optional = doc["optional"]
        shared = names[: len(names) - 2 * len(optional)]
        return FlagLstm.build_flag(shared, optional, hp, rng)
    return QuantileLstm.build(spec.architecture, doc["inputs"], hp, rng)


def write_manifest(path: str | Path, doc: Mapping) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parameter_count(model) -> int:
    if isinstance(model, dict):
        return sum(parameter_count(m) for m in model.values())
    return sum(p.size for p in model.named_parameters().values())


__all__ = [
    "ARCHITECTURES",
    "DEFAULT_HYPERPARAMETERS",
    "FlagLstm",
    "HydraBody",
    "HydraModel",
    "Hyperparameters",
    "ModelSpec",
    "MultiCatchmentHead",
    "PLACEHOLDER",
    "QuantileLstm",
    "SingleCatchmentHead",
    "SEARCH_GRIDS",
    "baseline_forward",
    "build_head",
    "declared_inputs",
    "flag_forward",
    "head_forward",
    "hydra_forward",
]
