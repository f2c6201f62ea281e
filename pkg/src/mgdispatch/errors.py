"""Exception types shared across the package."""


class DispatchError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ValidationError(DispatchError):
    pass


class SchemaError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class OutOfLinearRange(ValidationError):
    pass


class SolverError(DispatchError):
    pass


class NonConvergence(SolverError):
    def __init__(self, max_iter, final_mismatch):
        super().__init__(f"power flow did not converge in {max_iter} iterations "
                         f"(mismatch {final_mismatch:.3e})")
        self.max_iter = max_iter
        self.final_mismatch = final_mismatch


class SingularSensitivity(SolverError):
    pass


class SolverFailure(SolverError):
    def __init__(self, message, solution=None, agent=None):
        prefix = f"[{agent}] " if agent else ""
        super().__init__(prefix + message)
        self.solution = solution
        self.agent = agent


class AgentFailure(SolverError):
    def __init__(self, agent, iteration, cause):
        super().__init__(f"agent {agent} failed at iteration {iteration}: {cause}")
        self.agent = agent
        self.iteration = iteration
        self.cause = cause


class MaxIterExceeded(SolverError):
    def __init__(self, iterations, result=None):
        super().__init__(f"ADMM did not converge within {iterations} iterations")
        self.iterations = iterations
        self.result = result


class DegeneratePlanError(ValidationError):
    pass
