"""Robust price bounds and superhedging on finite path lattices, with the
path-discretisation machinery behind the continuous-time duality."""
from .discretise import (ExactPath, LebesguePartition, PiecewiseConstantPath, hat_discretise, hat_pipeline,
                         is_member_Dhat, lebesgue_partition, lift_continuous, shift_interval_rational)
from .hedging import (SemiStaticStrategy, check_admissible, integral_mimic_error, lift_strategy,
                      pathwise_integral, verify_superhedge)
from .lp import solve_lp
from .marginals import (DiscreteMarginal, PutPriceCurve, bl_distance, convex_order_leq, marginal_from_puts,
                        puts_from_marginal, strassen_feasible)
from .mot_lp import (LatticeModel, QuotedOption, dual_solve, duality_gap, eta_membership, penalty_sweep,
                     primal_solve)
from .paths import ALL, GridPath, InfoSpace, SupNormBall
from .payoffs import LookbackMax, call, forward, put

__version__ = "0.1.0"
