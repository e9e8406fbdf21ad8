"""Fine-tuning strategies as trainable-parameter masks, and parameter accounting."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .transformer import AudioTransformer, ModelConfig, build_model, param_inventory


class PeftStrategy(str, enum.Enum):
    FULL = "Full"
    HEAD = "Head"
    PARTIAL = "Partial"
    PROMPT = "Prompt"
    AATM = "AatM"
    AATMS = "AatMS"
    JOINT = "Joint"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name) -> PeftStrategy:
        if isinstance(name, cls):
            return name
        for member in cls:
            if member.value.lower() == str(name).lower():
                return member
        raise ConfigurationError(f"unknown strategy {name!r}; expected one of {[m.value for m in cls]}")

    @property
    def variant(self) -> str:
        if self in (PeftStrategy.AATMS, PeftStrategy.JOINT):
            return "aat-ms"
        if self is PeftStrategy.AATM:
            return "aat-m"
        return "vanilla"

    @property
    def uses_prompts(self) -> bool:
        return self in (PeftStrategy.PROMPT, PeftStrategy.JOINT)

    def validate(self, config: ModelConfig) -> None:
        if self.uses_prompts and config.prompt_length <= 0:
            raise ConfigurationError(f"strategy {self.value} needs prompt_length > 0")
        if self.variant != "vanilla" and not 0 < config.adapter_dim < config.embed_dim:
            raise ConfigurationError(f"strategy {self.value} needs 0 < adapter_dim < embed_dim")


# reference column order, fewest tuned parameters first
BUDGET_ORDER = (
    PeftStrategy.HEAD,
    PeftStrategy.PROMPT,
    PeftStrategy.AATM,
    PeftStrategy.AATMS,
    PeftStrategy.PARTIAL,
    PeftStrategy.FULL,
)

# Published tuning budgets for the AST-base backbone: (millions, percent).
REFERENCE_BUDGETS = {
    PeftStrategy.FULL: (87.295, 100.0),
    PeftStrategy.HEAD: (0.04, 0.02),
    PeftStrategy.PARTIAL: (42.544, 48.49),
    PeftStrategy.PROMPT: (0.128, 0.15),
    PeftStrategy.AATM: (3.567, 3.91),
    PeftStrategy.AATMS: (7.118, 7.51),
    PeftStrategy.JOINT: (7.236, 7.69),
}


def build_for_strategy(config: ModelConfig, strategy, seed: int = 0, adapter_seed: int | None = None) -> AudioTransformer:
    """Backbone from ``seed`` plus whatever the strategy adds."""
    strategy = PeftStrategy.parse(strategy)
    strategy.validate(config)
    return build_model(
        config,
        seed=seed,
        variant=strategy.variant,
        with_prompts=strategy.uses_prompts,
        adapter_seed=adapter_seed,
    )


def inventory_for_strategy(config: ModelConfig, strategy) -> dict[str, tuple[int, ...]]:
    strategy = PeftStrategy.parse(strategy)
    strategy.validate(config)
    return param_inventory(
        config,
        mlp_adapters=strategy.variant != "vanilla",
        spatial_adapters=strategy.variant == "aat-ms",
        prompts=strategy.uses_prompts,
    )


def _names(model) -> list[str]:
    if isinstance(model, AudioTransformer):
        return list(model.named_parameters())
    return list(model)


def _depth(names: list[str]) -> int:
    blocks = {int(n.split(".")[1]) for n in names if n.startswith("blocks.")}
    return max(blocks) + 1 if blocks else 0


def trainable_mask(model, strategy) -> set[str]:
    """Names of the parameters a strategy updates.

    ``model`` is an :class:`AudioTransformer` or any iterable of parameter
    names (e.g. a :func:`param_inventory`).
    """
    strategy = PeftStrategy.parse(strategy)
    names = _names(model)
    head = {n for n in names if n.startswith("head.")}
    prompts = {n for n in names if n.startswith("prompts.")}
    mlp_adapters = {n for n in names if ".mlp_adapter." in n}
    spatial_adapters = {n for n in names if ".spatial_adapter." in n}

    if strategy.uses_prompts and not prompts:
        raise ConfigurationError(f"strategy {strategy.value} needs a prompt bank on the model")
    if strategy.variant != "vanilla" and not mlp_adapters:
        raise ConfigurationError(f"strategy {strategy.value} needs MLP adapters on the model")
    if strategy.variant == "aat-ms" and not spatial_adapters:
        raise ConfigurationError(f"strategy {strategy.value} needs spatial adapters on the model")

    if strategy is PeftStrategy.FULL:
        return set(names)
    if strategy is PeftStrategy.HEAD:
        return head
    if strategy is PeftStrategy.PARTIAL:
        depth = _depth(names)
        first = depth // 2  # the later ceil(L/2) blocks
        late = {f"blocks.{i}." for i in range(first, depth)}
        return head | {n for n in names if any(n.startswith(p) for p in late)}
    if strategy is PeftStrategy.PROMPT:
        return head | prompts
    if strategy is PeftStrategy.AATM:
        return head | mlp_adapters
    if strategy is PeftStrategy.AATMS:
        return head | mlp_adapters | spatial_adapters
    return head | mlp_adapters | spatial_adapters | prompts


def apply_freeze(model: AudioTransformer, mask) -> AudioTransformer:
    """Set ``requires_grad`` on exactly the parameters named in ``mask``."""
    params = model.named_parameters()
    unknown = set(mask) - set(params)
    if unknown:
        raise ConfigurationError(f"mask names unknown parameters: {sorted(unknown)}")
    for name, p in params.items():
        p.requires_grad = name in mask
    return model


@dataclass(frozen=True)
class ParamReport:
    strategy: str
    tuning_params: int
    total_params: int
    percentage: float

    CSV_HEADER = ("strategy", "tuning_params", "total_params", "percentage")

    def csv_row(self) -> list[str]:
        return [self.strategy, str(self.tuning_params), str(self.total_params), f"{self.percentage:.4f}"]


def write_reports_csv(reports, stream=None) -> str:
    buf = io.StringIO() if stream is None else stream
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ParamReport.CSV_HEADER)
    for report in reports:
        writer.writerow(report.csv_row())
    return buf.getvalue() if stream is None else ""


def read_reports_csv(text: str) -> list[ParamReport]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        ParamReport(row["strategy"], int(row["tuning_params"]), int(row["total_params"]), float(row["percentage"]))
        for row in reader
    ]


def count_params(model, strategy) -> ParamReport:
    """Tuned and total parameter counts for a strategy.

    ``model`` is either a built :class:`AudioTransformer` (its parameters are
    counted as they are) or a :class:`ModelConfig`, in which case the
    strategy's architecture is counted analytically without allocating it.
    The total includes everything the strategy adds, so the percentage uses
    backbone + added parameters as its denominator.
    """
    strategy = PeftStrategy.parse(strategy)
    if isinstance(model, ModelConfig):
        shapes = inventory_for_strategy(model, strategy)
    else:
        shapes = {n: p.shape for n, p in model.named_parameters().items()}
    sizes = {n: math.prod(s) for n, s in shapes.items()}
    mask = trainable_mask(shapes, strategy)
    tuning = sum(sizes[n] for n in mask)
    total = sum(sizes.values())
    return ParamReport(strategy.value, tuning, total, 100.0 * tuning / total)


def parameter_groups(model) -> dict[str, int]:
    """Parameter count per top-level group (embedding, each block, prompts, head)."""
    if isinstance(model, AudioTransformer):
        shapes = {n: p.shape for n, p in model.named_parameters().items()}
    else:
        shapes = dict(model)
    groups: dict[str, int] = {}
    for name, shape in shapes.items():
        if name.startswith("blocks."):
            key = ".".join(name.split(".")[:2])
        elif name.startswith("prompts."):
            key = "prompts"
        elif name.startswith("head."):
            key = "head"
        else:
            key = "embedding"
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups
