from src.experiments.runners import (BranchingExperiment, CampbellExperiment, HierarchicalExperiment,
                                     InvariantLawExperiment, LogLaplaceExperiment, PdeFlowExperiment,
                                     RenormIterateExperiment, SolvePStarExperiment)
from src.experiments.verify import VerifyExperiment

SUBCOMMANDS = {
    cls.name: cls
    for cls in (InvariantLawExperiment, LogLaplaceExperiment, RenormIterateExperiment, PdeFlowExperiment,
                SolvePStarExperiment, BranchingExperiment, CampbellExperiment, HierarchicalExperiment,
                VerifyExperiment)
}
