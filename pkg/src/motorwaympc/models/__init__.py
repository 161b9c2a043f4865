from .common import (
	ControlInput,
	ControlTrajectory,
	CostBreakdown,
	ObstaclePrediction,
	Plan,
	PlanDiagnostics,
	PlanMode,
	PredictionSource,
	ReplanTrigger,
	VehicleClass,
	VehicleSnapshot,
	VehicleState,
	WorldSnapshot,
)
from .config import (
	ControlBounds,
	DPConfig,
	DrivingGoals,
	ManualDriverParams,
	PlannerParams,
	RoadGeometry,
	ScenarioConfig,
	SolverConfig,
	SpawnConfig,
	Weights,
)

__all__ = [
	'ControlBounds',
	'ControlInput',
	'ControlTrajectory',
	'CostBreakdown',
	'DPConfig',
	'DrivingGoals',
	'ManualDriverParams',
	'ObstaclePrediction',
	'Plan',
	'PlanDiagnostics',
	'PlanMode',
	'PlannerParams',
	'PredictionSource',
	'ReplanTrigger',
	'RoadGeometry',
	'ScenarioConfig',
	'SolverConfig',
	'SpawnConfig',
	'VehicleClass',
	'VehicleSnapshot',
	'VehicleState',
	'Weights',
	'WorldSnapshot',
]
