"""Factor-graph data model: variables, factors, views, correspondence pools.

Variables hold a manifold value (Isometry3, Isometry2 or a Euclidean
vector), a status and a stack of backup values for solver roll-back.
Factors are measurement terms connecting one or more variables; concrete
error/Jacobian implementations live in :mod:`fgopt.factors`.

A CorrespondencePool stores ONE template factor plus point containers and
a correspondence list; the solver sees it as many logical factors, one per
correspondence pair, without them ever being materialized in the graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import manifold


class DuplicateKey(KeyError):
    pass


class DanglingVariable(KeyError):
    pass


class EmptyStack(IndexError):
    pass


class InvalidSelection(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class VariableStatus(enum.Enum):
    ACTIVE = "active"
    FIXED = "fixed"
    DISABLED = "disabled"


@dataclass
class Variable:
    key: int
    value: object
    status: VariableStatus = VariableStatus.ACTIVE
    backup_stack: list = field(default_factory=list)

    @property
    def perturbation_dim(self):
        return manifold.perturbation_dim(self.value)

    def push(self):
        self.backup_stack.append(manifold.copy_value(self.value))

    def pop(self):
        if not self.backup_stack:
            raise EmptyStack(f"variable {self.key}: empty backup stack")
        restored = self.backup_stack.pop()
        if self.status != VariableStatus.FIXED:
            self.value = restored

    def discard_top(self):
        if not self.backup_stack:
            raise EmptyStack(f"variable {self.key}: empty backup stack")
        self.backup_stack.pop()


class FactorBase:
    """Common interface for measurement terms.

    Subclasses provide `error(values)` returning the residual vector (or
    None when the prediction is undefined at the current estimate, e.g. a
    point behind the camera) and `jacobians(values)` returning one block
    per variable, in the factor's variable order.
    """

    type_tag = "factor"

    def __init__(self, key, variables, measurement, information, kernel=None, enabled=True):
        self.key = key
        self.variables = tuple(int(v) for v in variables)
        if len(self.variables) < 1:
            raise ValueError("factor needs at least one variable")
        self.measurement = measurement
        information = np.asarray(information, dtype=float)
        _check_information(information)
        self.information = information
        self.kernel = kernel
        self.enabled = enabled
        self.level = 0

    @property
    def dim(self):
        return self.information.shape[0]

    def error(self, values):
        raise NotImplementedError

    def jacobians(self, values):
        raise NotImplementedError

    def hb_contribution(self, values):
        """Optional lowest-layer hook: directly return (H_blocks, b_blocks, chi2).

        H_blocks maps local variable index pairs (a, b) with b <= a to dense
        contributions J_a^T Omega J_b; b_blocks maps local index a to
        J_a^T Omega e.  Returning None selects the error+Jacobian path.
        """
        return None


def _check_information(omega):
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise ValueError("information matrix must be square")
    scale = max(1.0, float(np.max(np.abs(omega))))
    if float(np.max(np.abs(omega - omega.T))) > 1e-12 * scale:
        raise ValueError("information matrix must be symmetric")
    if float(np.min(np.linalg.eigvalsh(omega))) < -1e-9 * scale:
        raise ValueError("information matrix must be positive semi-definite")


class CorrespondencePool:
    """One template factor iterated over a correspondence list.

    `fixed_data` / `moving_data` are point containers; `correspondences` is
    a list of (moving_index, fixed_index) pairs and can be rebound at any
    time, changing the factors yielded on the next pass.
    """

    def __init__(self, key, template, fixed_data, moving_data, correspondences):
        self.key = key
        self.template = template
        self.fixed_data = fixed_data
        self.moving_data = moving_data
        self.correspondences = list(correspondences)

    @property
    def variables(self):
        return self.template.variables

    @property
    def enabled(self):
        return self.template.enabled

    @property
    def type_tag(self):
        return self.template.type_tag

    def __len__(self):
        return len(self.correspondences)

    def iterate(self):
        for mi, fi in self.correspondences:
            if not 0 <= mi < len(self.moving_data):
                raise IndexOutOfRange(f"moving index {mi} out of range")
            if not 0 <= fi < len(self.fixed_data):
                raise IndexOutOfRange(f"fixed index {fi} out of range")
            self.template.bind_pair(self.moving_data[mi], self.fixed_data[fi])
            yield self.template


def iterate_correspondences(pool: CorrespondencePool):
    """Stream of logical factors for a pool (rebinds the shared template)."""
    return pool.iterate()


class FactorGraph:
    def __init__(self):
        self.variables = {}
        self.factors = {}

    # -- construction --------------------------------------------------------

    def add_variable(self, var: Variable):
        if var.key in self.variables:
            raise DuplicateKey(f"variable key {var.key} already in graph")
        self.variables[var.key] = var
        return var.key

    def new_variable(self, value, status=VariableStatus.ACTIVE):
        """Auto-assigns the next free key."""
        key = max(self.variables, default=-1) + 1
        return self.add_variable(Variable(key, value, status))

    def add_factor(self, factor):
        if factor.key in self.factors:
            raise DuplicateKey(f"factor key {factor.key} already in graph")
        for vk in factor.variables:
            if vk not in self.variables:
                raise DanglingVariable(f"factor {factor.key} references missing variable {vk}")
        self.factors[factor.key] = factor
        return factor.key

    def next_factor_key(self):
        return max(self.factors, default=-1) + 1

    # -- solver access -------------------------------------------------------

    def resolve(self, key) -> Variable:
        return self.variables[key]

    def solver_variables(self):
        return [self.variables[k] for k in sorted(self.variables)]

    def solver_factor_entries(self):
        return [self.factors[k] for k in sorted(self.factors)]

    def factor_is_active(self, factor) -> bool:
        if not factor.enabled:
            return False
        return all(
            self.resolve(vk).status != VariableStatus.DISABLED for vk in factor.variables
        )

    # -- roll-back ------------------------------------------------------------

    def push_values(self):
        for v in self.solver_variables():
            v.push()

    def pop_values(self):
        for v in self.solver_variables():
            v.pop()

    def discard_top(self):
        for v in self.solver_variables():
            v.discard_top()


class GraphView:
    """Read/write window onto a subset of a graph; no structural mutation.

    A factor may be selected only if every variable it touches is either in
    the view or Fixed in the parent; anything else is rejected because the
    solver could not tell how to treat the outside variable.
    """

    def __init__(self, parent, variable_keys, factor_keys):
        self.parent = parent
        self.variable_keys = set(int(k) for k in variable_keys)
        self.factor_keys = set(int(k) for k in factor_keys)
        for vk in self.variable_keys:
            if vk not in parent.variables:
                raise InvalidSelection(f"variable {vk} not in parent graph")
        for fk in self.factor_keys:
            if fk not in parent.factors:
                raise InvalidSelection(f"factor {fk} not in parent graph")
            entry = parent.factors[fk]
            for vk in entry.variables:
                if vk in self.variable_keys:
                    continue
                if parent.variables[vk].status == VariableStatus.FIXED:
                    continue
                raise InvalidSelection(
                    f"factor {fk} references non-Fixed variable {vk} outside the view"
                )

    def resolve(self, key) -> Variable:
        return self.parent.variables[key]

    def solver_variables(self):
        return [self.parent.variables[k] for k in sorted(self.variable_keys)]

    def solver_factor_entries(self):
        return [self.parent.factors[k] for k in sorted(self.factor_keys)]

    def factor_is_active(self, factor) -> bool:
        return self.parent.factor_is_active(factor)

    def push_values(self):
        for v in self.solver_variables():
            v.push()

    def pop_values(self):
        for v in self.solver_variables():
            v.pop()

    def discard_top(self):
        for v in self.solver_variables():
            v.discard_top()


def make_view(graph: FactorGraph, variable_keys, factor_keys) -> GraphView:
    return GraphView(graph, variable_keys, factor_keys)
