"""Run configuration: sectioned ``key = value;`` text.

Example::

    [mesh]
    domain_min = [0.0, 0.0, 0.0];
    R_bkg = 5;
    [fem]
    BasisFunction = 1;
    gp_max_splitting = 2;
    gp_handle = 32;

Values are Python literals (numbers, strings, booleans, lists); the trailing
semicolon is optional and ``#`` or ``//`` start comments.
"""
import ast
import hashlib
from dataclasses import dataclass, field, fields, asdict

import numpy as np

ADAPTIVE_GP_HANDLE = 32


class ConfigError(ValueError):
    pass


@dataclass
class GeometrySection:
    stl: str = ""
    body: str = "sphere"               # sphere | stl | none
    body_center: list = field(default_factory=lambda: [3.0, 5.0, 5.0])
    body_diameter: float = 1.0
    body_level: int = 5                # icosphere subdivision level
    scale: float = 1.0
    translate: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class MeshSection:
    domain_min: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    domain_max: list = field(default_factory=lambda: [10.0, 10.0, 10.0])
    R_bkg: int = 5
    R_wake: int = 5
    wake_min: list = field(default_factory=list)
    wake_max: list = field(default_factory=list)
    R_bdy: int = 6
    bdy_min: list = field(default_factory=lambda: [2.0, 4.0, 4.0])
    bdy_max: list = field(default_factory=lambda: [4.0, 6.0, 6.0])
    bdy_distance: float = 0.0          # used when bdy_min/bdy_max are empty
    curve: str = "hilbert"


@dataclass
class FemSection:
    BasisFunction: int = 1
    gp_max_splitting: int = 2
    gp_handle: int = ADAPTIVE_GP_HANDLE
    surface_rule: str = "7pt"
    split_rule: str = "surface"


@dataclass
class FlowSection:
    case: str = "channel"              # channel | cavity
    Re: float = 100.0
    U_inf: float = 1.0
    dt: float = 0.1
    T_final: float = 1.0
    steady: bool = False
    ramp: list = field(default_factory=list)   # [[steps, dt, Re], ...] run before the main stage
    C_b: float = 8.0
    theta: float = 0.5


@dataclass
class SolverSection:
    newton_rtol: float = 1e-6
    newton_atol: float = 1e-6
    max_newton: int = 20
    krylov: str = "bicgstab"
    precond: str = "ilu"
    krylov_tol: float = 1e-6


@dataclass
class PartitionSection:
    RatioWeight: float = 3.3
    parts: int = 1
    parts_list: list = field(default_factory=lambda: [4, 16, 64])


@dataclass
class OutputSection:
    directory: str = "output"
    vtu_every: int = 0
    vtu_format: str = "binary"          # binary | ascii
    compress: bool = True
    checkpoint_every: int = 0
    restart: str = ""
    deterministic: bool = True


@dataclass
class BenchSection:
    grids: list = field(default_factory=lambda: [64, 128, 256])
    levels: list = field(default_factory=lambda: [0, 1, 2, 3])
    cavity_level: int = 4
    repeats: int = 1


SECTIONS = {
    "geometry": GeometrySection, "mesh": MeshSection, "fem": FemSection,
    "flow": FlowSection, "solver": SolverSection, "partition": PartitionSection,
    "output": OutputSection, "bench": BenchSection,
}


@dataclass
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    mesh: MeshSection = field(default_factory=MeshSection)
    fem: FemSection = field(default_factory=FemSection)
    flow: FlowSection = field(default_factory=FlowSection)
    solver: SolverSection = field(default_factory=SolverSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    output: OutputSection = field(default_factory=OutputSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self):
        m = self.mesh
        levels = [m.R_bkg, m.R_wake, m.R_bdy]
        if min(levels) < 0 or max(levels) > 19:
            raise ConfigError(f"refinement levels {levels} outside [0, 19]")
        if self.fem.BasisFunction not in (1, 2):
            raise ConfigError("BasisFunction must be 1 or 2")
        if self.fem.gp_max_splitting < 0:
            raise ConfigError("gp_max_splitting must be non-negative")
        if self.flow.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.flow.Re <= 0:
            raise ConfigError("Re must be positive")
        lo, hi = np.asarray(m.domain_min, float), np.asarray(m.domain_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ConfigError("domain_min/domain_max must be 3-vectors with min < max")
        return self

    @property
    def adaptive(self):
        return self.fem.gp_handle == ADAPTIVE_GP_HANDLE

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return dumps(self)

    def digest(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _strip(line):
    out, quote = [], None
    i = 0
    while i < len(line):
        ch = line[i]
        if quote:
            if ch == "\\" and i + 1 < len(line):
                out.append(ch)
                i += 1
                ch = line[i]
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#" or line.startswith("//", i):
            break
        out.append(ch)
        i += 1
    return "".join(out).strip()


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


class _Bools(ast.NodeTransformer):
    def visit_Name(self, node):
        if node.id in ("true", "false"):
            return ast.copy_location(ast.Constant(node.id == "true"), node)
        return node


def _literal(text, key):
    try:
        tree = _Bools().visit(ast.parse(text.strip(), mode="eval"))
        return ast.literal_eval(tree)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"{key}: cannot parse value {text!r}") from exc


def loads(text):
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]") and "=" not in line:
            name = line[1:-1].strip()
            if name not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            section = getattr(cfg, name)
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of a section")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip().rstrip(";").strip()
        names = {f.name for f in fields(section)}
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(section, key, _coerce(_literal(val, key), getattr(section, key), key))
    return cfg.validate()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)


def dumps(cfg):
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in fields(sec):
            out.append(f"{f.name} = {_fmt(getattr(sec, f.name))};")
        out.append("")
    return "\n".join(out)


def load(path):
    with open(path) as fh:
        return loads(fh.read())


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
