# pylint: disable=logging-fstring-interpolation
"""Pipeline configuration: a toml file checked against the packaged template,
overridden by command line flags."""
import difflib
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import toml

from .egt import EgtParams
from .exceptions import ConfigError, RerankError
from .qe import QeParams
from .sv import RansacParams
from .synthetic import SynthParams
from .utils import derive_seed, to_path

LOGGER = logging.getLogger(__name__)

TEMPLATE_PATH = Path(__file__).parent / "config_template.toml"

PATH_KEYS = (
    "query_a",
    "query_b",
    "index_a",
    "index_b",
    "query_desc",
    "index_desc",
    "train_desc",
    "local_features",
    "graph",
    "labels",
    "truth",
    "submission",
    "output",
)


def load_template() -> dict:
    return toml.load(TEMPLATE_PATH)


class Config(dict):
    """ All settings of a run, a toml file laid over the packaged template. """

    def __init__(self, config_file: Optional[Union[str, Path]] = None) -> None:
        super().__init__()
        self.ref_config = load_template()
        self.copy_into_super(self.ref_config)
        if config_file is None:
            return
        config_file = to_path(config_file)
        if not config_file.is_file():
            raise FileNotFoundError(f"Config file: {config_file} not found.")
        try:
            config = toml.load(config_file)
        except toml.TomlDecodeError as err:
            raise ConfigError(f"{config_file}: {err}") from err
        self.check_config(config)
        self.copy_into_super(config)

    def copy_into_super(self, config: dict) -> None:
        """ Given a dict with subdicts, copy content into super, section by section. """
        for key, item in config.items():
            if isinstance(item, dict):
                self.setdefault(key, {}).update(item)
            else:
                self[key] = item

    def closest_key(self, key: str, choices: list[str]) -> str:
        matches = difflib.get_close_matches(key, choices, n=1)
        return f", did you mean {matches[0]!r}?" if matches else ""

    def check_config(self, config: dict) -> None:
        """Check that every key and sub-key of config is in the template.
        Unknown keys raise ConfigError naming the closest valid key."""
        for key, item in config.items():
            if key not in self.ref_config or not isinstance(item, dict):
                hint = self.closest_key(key, list(self.ref_config))
                raise ConfigError(f"Unknown config section [{key}]{hint}")
            for sub_key in item:
                if sub_key not in self.ref_config[key]:
                    hint = self.closest_key(sub_key, list(self.ref_config[key]))
                    raise ConfigError(f"Unknown config key {key}.{sub_key}{hint}")


@dataclass
class PipelineConfig:
    """Typed view of one run's settings. Unset paths, t, max_steps and
    threads are None."""

    query_a: Optional[Path] = None
    query_b: Optional[Path] = None
    index_a: Optional[Path] = None
    index_b: Optional[Path] = None
    query_desc: Optional[Path] = None
    index_desc: Optional[Path] = None
    train_desc: Optional[Path] = None
    local_features: Optional[Path] = None
    graph: Optional[Path] = None
    labels: Optional[Path] = None
    truth: Optional[Path] = None
    submission: Optional[Path] = None
    output: Path = Path(".")
    k: int = 100
    t: Optional[float] = None
    p: int = 100
    max_steps: Optional[int] = None
    sv_depth: int = 10
    expand_count: int = 2
    alpha: float = 0.0
    database_side: bool = True
    iterations: int = 1000
    inlier_threshold: float = 3.0
    ratio: float = 0.8
    min_inliers: int = 10
    synth: dict[str, Any] = field(default_factory=dict)
    qesv: bool = True
    egt: bool = True
    semisup: bool = True
    rerank_semisup: bool = False
    synthetic: bool = False
    seed: int = 42
    threads: Optional[int] = None

    @classmethod
    def from_config(
        cls, config: Optional[Config] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "PipelineConfig":
        """Flatten a Config and apply overrides on top. Overrides that are None
        are ignored; "synth_<name>" overrides go to the synth section.
        Args:
            config (Config): File settings. Default: the template alone.
            overrides (mapping): Values from the command line.
        """
        config = Config() if config is None else config
        names = {f.name for f in fields(cls)}
        values: dict[str, Any] = {}
        for section, entries in config.items():
            if section == "synth":
                values["synth"] = dict(entries)
            else:
                values.update({key: value for key, value in entries.items() if key in names})
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key.startswith("synth_"):
                values["synth"][key.removeprefix("synth_")] = value
            elif key in names:
                values[key] = value
        for key in PATH_KEYS:
            values[key] = to_path(values[key]) if values.get(key) not in (None, "") else None
        if values["output"] is None:
            values["output"] = Path(".")
        if values.get("t") == "":
            values["t"] = None
        for key in ("max_steps", "threads"):
            if values.get(key) == 0:
                values[key] = None
        return cls(**values)

    def egt_params(self) -> EgtParams:
        if self.t is None:
            raise ConfigError("EGT threshold is required: set [egt] t or pass --t")
        return EgtParams(t=float(self.t), p=self.p, max_steps=self.max_steps)

    def qe_params(self) -> QeParams:
        return QeParams(
            sv_depth=self.sv_depth,
            expand_count=self.expand_count,
            alpha=self.alpha,
            database_side=self.database_side,
        )

    def ransac_params(self) -> RansacParams:
        return RansacParams(
            iterations=self.iterations,
            inlier_threshold=self.inlier_threshold,
            ratio=self.ratio,
            min_inliers=self.min_inliers,
            seed=derive_seed(self.seed, "ransac"),
        )

    def synth_params(self) -> SynthParams:
        return SynthParams(**self.synth, seed=derive_seed(self.seed, "synth"))

    def _require(self, command: str, *names: str) -> None:
        missing = [name for name in names if getattr(self, name) is None]
        if missing:
            flags = ", ".join(f"--{name.replace('_', '-')}" for name in missing)
            raise ConfigError(f"{command} needs {flags} (or the [paths] entries {missing})")

    def validate(self, command: str) -> None:
        """Check everything command needs before any computation starts.
        Raises:
            ConfigError: Missing inputs, broken stage chain or bad parameters.
        """
        if self.k < 1:
            raise ConfigError(f"Invalid {self.k=}, must be at least 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"Invalid {self.threads=}, must be at least 1")
        if command == "ablate" and self.semisup and not self.egt:
            raise ConfigError("The semisup stage requires the egt stage, pass --no-semisup with --no-egt")
        try:
            if command in ("qesv", "ablate"):
                self.qe_params()
                self.ransac_params()
            if command == "synth" or (command == "ablate" and self.synthetic):
                self.synth_params()
            if command == "rerank" or (command == "ablate" and self.egt):
                self.egt_params()
        except ConfigError:
            raise
        except (RerankError, TypeError, ValueError) as err:
            raise ConfigError(f"Invalid parameters for {command}: {err}") from err

        if command == "knn":
            self._require(command, "query_desc", "index_desc")
        elif command == "qesv":
            self._require(command, "graph", "query_desc", "index_desc", "local_features")
        elif command == "rerank":
            if not self.egt:
                raise ConfigError("rerank runs EGT, but the egt stage is switched off")
            self._require(command, "graph", "query_desc", "index_desc")
            if self.rerank_semisup:
                self._require(command, "labels", "train_desc")
        elif command == "eval":
            self._require(command, "submission", "truth")
        elif command == "ablate" and not self.synthetic:
            self._require(command, "query_a", "query_b", "index_a", "index_b", "truth")
            if self.qesv:
                self._require(command, "local_features")
            if self.semisup:
                self._require(command, "labels", "train_desc")
        LOGGER.debug(f"Validated configuration for {command}")
