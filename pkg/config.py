import configparser
import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()


class Config:
    # Process settings read from the environment; numerical settings below are fixed
    OUTPUT_ROOT = os.getenv('BLOWUP_OUTPUT_ROOT', 'runs')
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'blowup_lab.log')
    SHOW_PROGRESS = os.getenv('SHOW_PROGRESS', '0') == '1'
    GREEN_WORKERS = int(os.getenv('GREEN_WORKERS', 1))

    # Newton
    NEWTON_TOLERANCE = 1e-10
    NEWTON_MAX_ITERATIONS = 50
    NEWTON_MAX_HALVINGS = 20
    CONTINUATION_MAX_BISECTIONS = 5
    ZERO_SOLUTION_THRESHOLD = 0.5
    DEFLATION_SHIFT = 1.0
    DEFLATION_POWER = 2.0
    # Multi-peak starts are assembled at this exponent, then continued by this ratio per step
    MULTI_PEAK_SEED_P = 6.0
    CONTINUATION_RATIO = 1.25
    # Below the radial positive solution level for p >= 3, so Newton lands on u = 0
    CONSTANT_ANSATZ_LEVEL = 0.5

    # Quadrature
    BOUNDARY_QUADRATURE_DEGREE = 8
    MAX_SUBDIVISION_DEPTH = 6
    SINGULAR_SUBDIVISION_DEPTH = 8

    # Meshing
    GRADING_FACTOR = 8.0
    GRADING_RATE = 0.25
    MESH_REPAIR_ATTEMPTS = 8

    # Diagnostics
    PEAK_THRESHOLD = 10.0
    PEAK_MAX_COUNT = 4
    BETA_RADIUS_FRACTION = 0.1
    PROFILE_WINDOW = 4.0
    POHOZAEV_DELTA = 0.3
    POHOZAEV_TOLERANCE = 0.05
    BETA_TOLERANCE = 0.10
    FAR_FIELD_DELTA = 0.5
    FAR_FIELD_TOLERANCE = 0.25

    # Green / phi
    PHI_GRADIENT_TOLERANCE = 1e-4
    PHI_NOISE_FLOOR = 0.05
    PHI_MAX_STEPS = 200


def _split_floats(value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    text = str(value).strip()
    if not text:
        return []
    return [float(item) for item in text.split(',') if item.strip()]


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class DomainSection(_Section):
    """Boundary preset: disk, ellipse or star."""
    name: str = 'disk'
    radius: float = 1.0
    a: float = 2.0
    b: float = 1.0
    amplitude: float = 0.2
    lobes: int = 5

    @field_validator('name')
    @classmethod
    def _known_preset(cls, value):
        if value not in ('disk', 'ellipse', 'star'):
            raise ValueError(f"unknown domain preset '{value}'")
        return value

    def curve_parameters(self) -> dict:
        if self.name == 'disk':
            return {'radius': self.radius}
        if self.name == 'ellipse':
            return {'a': self.a, 'b': self.b}
        return {'radius': self.radius, 'amplitude': self.amplitude, 'lobes': self.lobes}


class MeshSection(_Section):
    """Target size h and boundary grading written as '(x,y):factor' items separated by ';'."""
    h: float = 0.1
    grade: str = ''
    core_size: Optional[float] = None

    @field_validator('h')
    @classmethod
    def _positive_h(cls, value):
        if not value > 0:
            raise ValueError('h must be positive')
        return value


class SolverSection(_Section):
    p_list: List[float] = Field(default_factory=lambda: [10.0])
    peaks: str = '0'
    m: int = 1
    ansatz: str = 'bubble'
    amplitude: float = 1.6487212707001282
    tolerance: float = Config.NEWTON_TOLERANCE
    max_iterations: int = Config.NEWTON_MAX_ITERATIONS
    max_halvings: int = Config.NEWTON_MAX_HALVINGS
    deflation_shift: float = Config.DEFLATION_SHIFT

    @field_validator('p_list', mode='before')
    @classmethod
    def _parse_p_list(cls, value):
        return _split_floats(value)

    @field_validator('ansatz')
    @classmethod
    def _known_ansatz(cls, value):
        if value not in ('bubble', 'constant'):
            raise ValueError(f"unknown ansatz '{value}'")
        return value

    @model_validator(mode='after')
    def _check_schedule(self):
        if not self.p_list:
            raise ValueError('p_list must not be empty')
        if any(b <= a for a, b in zip(self.p_list, self.p_list[1:])):
            raise ValueError('p_list must be strictly increasing')
        if self.m < 1:
            raise ValueError('m must be at least 1')
        return self


class DiagnosticsSection(_Section):
    threshold: float = Config.PEAK_THRESHOLD
    max_peaks: int = Config.PEAK_MAX_COUNT
    beta_radius: Optional[float] = None
    profile_window: float = Config.PROFILE_WINDOW
    pohozaev_delta: float = Config.POHOZAEV_DELTA
    decay_gamma: float = 1.0
    golden: str = ''


class GreenSection(_Section):
    robin_samples: int = 16
    phi_crit: int = 0
    starts: int = 4
    noise_floor: float = Config.PHI_NOISE_FLOOR
    tolerance: float = Config.PHI_GRADIENT_TOLERANCE
    max_steps: int = Config.PHI_MAX_STEPS


class OutputSection(_Section):
    directory: str = ''
    seed: int = 0


class RunConfig(_Section):
    domain: DomainSection = Field(default_factory=DomainSection)
    mesh: MeshSection = Field(default_factory=MeshSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    green: GreenSection = Field(default_factory=GreenSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @classmethod
    def from_file(cls, path) -> 'RunConfig':
        """Parse a sectioned key = value file; unknown sections or keys are rejected."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                parser.read_file(handle)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"Cannot read config file {path}: {str(e)}")
        data = {section: dict(parser.items(section)) for section in parser.sections()}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}")

    def with_overrides(self, overrides: dict) -> 'RunConfig':
        """Return a copy with {section: {key: value}} applied on top; None values are skipped."""
        data = self.model_dump()
        for section, values in overrides.items():
            for key, value in values.items():
                if value is None:
                    continue
                if section not in data:
                    raise ConfigError(f"Unknown config section '{section}'")
                data[section][key] = value
        return RunConfig.from_dict(data)

    def output_directory(self) -> Path:
        if self.output.directory:
            return Path(self.output.directory)
        return Path(Config.OUTPUT_ROOT)
