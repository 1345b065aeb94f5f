from .main import Main  # noqa: F401, E402  # isort:skip
from .core import (  # noqa: F401, E402
    CdmsError,
    Configs,
    InvariantViolation,
    UserError,
)
from .cql import QueryAst, parse, render, validate  # noqa: F401, E402
from .engine import CostModel, Server, SpaceGateway  # noqa: F401, E402
from .matcher import MatcherState, SchemaMapping, match_schema  # noqa: F401, E402
from .metrics import Metrics  # noqa: F401, E402
from .model import (  # noqa: F401, E402
    AttributeValue,
    GlobalSchema,
    LocalSchema,
    parse_schema_template,
    render_schema_template,
)
from .runner import Runner  # noqa: F401, E402
from .simnet import SimConfig, SimWorld, build_world, run_query_experiment  # noqa: F401, E402
from .snapshot import load_world, save_world  # noqa: F401, E402
