"""
Configuration module for vsex.
This module defines the Config class which stores the resolved settings of
one CLI run: paths, seeds, system and camera parameters, network sizes,
optimisation and particle-filter settings.

Settings come from three sources. Command-line flags win over a JSON
config file, which wins over the defaults below. The resolved settings are
written next to every output so a run can be repeated from that file
alone.
"""

from vsex.camera import CameraConfig
from vsex.datasets import N_TRAIN, T_TRAIN
from vsex.errors import ConfigError
from vsex.evalkit import SweepConfig
from vsex.lorenz import LorenzConfig
from vsex.particle_filter import PfConfig
from vsex.utils import read_json
from vsex.vse import TrainConfig

# Per-command defaults applied beneath the JSON file and flags.
COMMAND_DEFAULTS = {
    "sweep": {"n_seq": 20, "T": 200},
}


class Config:
    """
    Run configuration for vsex.

    Attributes:
        command (str): Subcommand the settings were resolved for.
        data (str): Input dataset path.
        out (str): Output path (dataset, checkpoint, estimates or table).
        checkpoint (str): VSE checkpoint for infer.
        truth (str): Dataset holding ground-truth states for evaluate.
        estimates (str): Estimates dataset for evaluate.
        resume (str): Checkpoint to continue training from.
        log (str): Training log CSV; defaults to ``<out>.log.csv``.
        seed (int): Root seed of every random stream.
        threads (int): Torch threads and worker processes.
        verbose (bool): Toggle for debug logging.
        n_seq (int): Number of sequences to generate.
        T (int): Sequence length.
        smnr_db (float): Target SMNR of a generated dataset.
        n_limit (int): Train on the first n_limit sequences only.
        smnr_only (bool): evaluate reports the dataset SMNR and stops.
        smnr_list (list): SMNR values of the sweep.
        methods (list): Sweep methods among vse, pf and zero.
        vse_checkpoints (dict): SMNR (as string) to checkpoint for the
            sweep.
    """

    def __init__(self, **kwargs):
        self.command = kwargs.pop("command", None)
        self.data = kwargs.pop("data", None)
        self.out = kwargs.pop("out", None)
        self.checkpoint = kwargs.pop("checkpoint", None)
        self.truth = kwargs.pop("truth", None)
        self.estimates = kwargs.pop("estimates", None)
        self.resume = kwargs.pop("resume", None)
        self.log = kwargs.pop("log", None)
        self.seed = int(kwargs.pop("seed", 0))
        self.threads = int(kwargs.pop("threads", 1))
        self.verbose = bool(kwargs.pop("verbose", False))
        # data generation
        self.n_seq = int(kwargs.pop("n_seq", N_TRAIN))
        self.T = int(kwargs.pop("T", T_TRAIN))
        self.smnr_db = float(kwargs.pop("smnr_db", 10.0))
        self.delta = float(kwargs.pop("delta", 0.02))
        self.sigma_e2 = float(kwargs.pop("sigma_e2", 0.1))
        self.taylor_order = int(kwargs.pop("taylor_order", 5))
        self.res_x = int(kwargs.pop("res_x", 8))
        self.res_y = int(kwargs.pop("res_y", 8))
        self.range_x = list(kwargs.pop("range_x", [-30.0, 30.0]))
        self.range_y = list(kwargs.pop("range_y", [-40.0, 40.0]))
        # training
        self.hidden_dim = int(kwargs.pop("hidden_dim", 80))
        self.num_layers = int(kwargs.pop("num_layers", 2))
        self.head_dim = int(kwargs.pop("head_dim", 128))
        self.samples = int(kwargs.pop("samples", 10))
        self.batch_size = int(kwargs.pop("batch_size", 128))
        self.epochs = int(kwargs.pop("epochs", 500))
        self.lr = float(kwargs.pop("lr", 1e-3))
        self.lr_factor = float(kwargs.pop("lr_factor", 0.5))
        self.lr_patience = int(kwargs.pop("lr_patience", 20))
        self.lr_min = float(kwargs.pop("lr_min", 1e-5))
        self.clip_norm = float(kwargs.pop("clip_norm", 10.0))
        self.val_fraction = float(kwargs.pop("val_fraction", 0.1))
        self.early_stop_patience = int(
            kwargs.pop("early_stop_patience", 60)
        )
        n_limit = kwargs.pop("n_limit", None)
        self.n_limit = None if n_limit is None else int(n_limit)
        # particle filter
        self.particles = int(kwargs.pop("particles", 500))
        self.ess_fraction = float(kwargs.pop("ess_fraction", 0.5))
        # evaluation
        self.smnr_only = bool(kwargs.pop("smnr_only", False))
        self.smnr_list = [
            float(v) for v in kwargs.pop("smnr_list", [0.0, 10.0, 20.0])
        ]
        self.methods = list(kwargs.pop("methods", ["pf", "zero"]))
        self.vse_checkpoints = {
            str(k): v for k, v in kwargs.pop("vse_checkpoints", {}).items()
        }
        if kwargs:
            raise ConfigError(
                f"Unknown configuration keys: {', '.join(sorted(kwargs))}"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.n_limit is not None and self.n_limit < 1:
            raise ConfigError("n_limit must be >= 1")

    @classmethod
    def from_sources(cls, defaults=None, json_path=None, flags=None):
        """
        Merge defaults, a JSON config file and explicit flags, in rising
        order of precedence.

        Raises:
            ConfigError: If the JSON file cannot be read or holds unknown
                keys.
        """
        merged = dict(defaults or {})
        if json_path:
            try:
                merged.update(read_json(json_path))
            except (OSError, ValueError) as e:
                raise ConfigError(
                    f"Cannot read config file {json_path}: {e}"
                ) from e
        merged.update(flags or {})
        return cls(**merged)

    def to_dict(self) -> dict:
        return dict(vars(self))

    def lorenz(self) -> LorenzConfig:
        return LorenzConfig(
            delta=self.delta,
            sigma_e2=self.sigma_e2,
            taylor_order=self.taylor_order,
        )

    def camera(self) -> CameraConfig:
        return CameraConfig(
            res_x=self.res_x,
            res_y=self.res_y,
            range_x=self.range_x,
            range_y=self.range_y,
        )

    def training(self, show_progress: bool = False) -> TrainConfig:
        return TrainConfig(
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            head_dim=self.head_dim,
            samples=self.samples,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            lr_factor=self.lr_factor,
            lr_patience=self.lr_patience,
            lr_min=self.lr_min,
            clip_norm=self.clip_norm,
            val_fraction=self.val_fraction,
            early_stop_patience=self.early_stop_patience,
            seed=self.seed,
            show_progress=show_progress,
        )

    def pf(self) -> PfConfig:
        return PfConfig(
            particles=self.particles,
            seed=self.seed,
            ess_fraction=self.ess_fraction,
        )

    def sweep(self) -> SweepConfig:
        return SweepConfig(
            n_seq=self.n_seq,
            T=self.T,
            seed=self.seed,
            lorenz=self.lorenz(),
            camera=self.camera(),
            pf=self.pf(),
            max_workers=self.threads,
        )
