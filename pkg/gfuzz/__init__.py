from .config import CampaignConfig, resolve_config
from .distance import TargetSite, analyze, resolve_target
from .fuzz_engine import Campaign, minimize_poc, plan_campaign, run_campaign
from .graph_model import Program, load_program
from .inference import infer_all, load_knowledge_base
from .inputs import Call, Input, Ref
from .sim_kernel import Scenario, SimExecutor, load_scenario
