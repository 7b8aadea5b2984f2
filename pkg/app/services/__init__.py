# Services package
from .config_service import ConfigService, RunContext, get_config_service, parse_config
from .estimator_service import EstimatorService, get_estimator_service
from .limits_service import LimitLawService, get_limit_law_service
from .lyapunov_service import LyapunovService, get_lyapunov_service
from .results_service import ResultsService, get_results_service
from .run_service import RunService, get_run_service
