"""Multigrid multilevel Monte Carlo for coupled free/porous flow with random conductivity."""
from .mesh import DomainSpec, MeshHierarchy, build_hierarchy
from .randfield import CovarianceSpec, FieldSample
from .fem import BlockSystem, PhysicalParams, ForcingData, Solution
from .solver import CycleConfig, SolveReport
from .mc import CostModel, VarianceModel, MlmcPlan, Estimate, allocate

__version__ = "0.1.0"
