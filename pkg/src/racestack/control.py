"""3-DOF vehicle model, MPC trajectory tracker and the pure-pursuit baseline.

State vector order (``VehicleState.as_array``)::

    [x, y, psi, U, V, r, delta_f, a_x, e_y, e_psi]

Inputs are the steering rate ``zeta_f`` and longitudinal jerk ``J_x``.  The
lateral error ``e_y`` is positive when the vehicle is left of the path and
``e_psi = psi - psi_path``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .errors import InvalidInputError, LowSpeedError
from .geometry import wrap_angle

NX = 10
NU = 2
IX, IY, IPSI, IU, IV, IR, IDELTA, IAX, IEY, IEPSI = range(NX)


@dataclass(frozen=True)
class VehicleParams:
    M: float = 300.0
    I_zz: float = 150.0
    l_f: float = 0.8
    l_r: float = 0.8
    C_af: float = 30000.0
    C_ar: float = 30000.0
    delta_max: float = 0.4
    zeta_max: float = 1.5
    a_max: float = 4.0
    J_max: float = 20.0
    U_min: float = 0.5
    width: float = 1.4
    kin_relax: float = 10.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise InvalidInputError(f"vehicle parameter {k} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    U: float = 0.0
    V: float = 0.0
    r: float = 0.0
    delta_f: float = 0.0
    a_x: float = 0.0
    e_y: float = 0.0
    e_psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.U, self.V, self.r, self.delta_f, self.a_x, self.e_y, self.e_psi])

    @classmethod
    def from_array(cls, v) -> "VehicleState":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), wrap_angle(float(v[2])), max(float(v[3]), 0.0), float(v[4]),
                   float(v[5]), float(v[6]), float(v[7]), float(v[8]), wrap_angle(float(v[9])))

    def with_errors(self, e_y: float, e_psi: float) -> "VehicleState":
        return replace(self, e_y=float(e_y), e_psi=wrap_angle(float(e_psi)))


@dataclass(frozen=True)
class ControlInput:
    zeta_f: float = 0.0
    J_x: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.zeta_f, self.J_x])


@dataclass(frozen=True)
class MpcConfig:
    N: int = 20
    dt: float = 0.05
    W_u: float = 400.0
    W_epsi: float = 20.0
    W_ey: float = 3.0
    W_sh: float = 1000.0
    e_max: float = 0.5
    slack_max: float = 1.5
    W_v: float = 2.0
    W_zeta: float = 0.1
    W_J: float = 0.01
    W_box: float = 1e4
    iterations: int = 200
    rollout_substep: float = 0.01

    def __post_init__(self):
        if self.N < 1 or self.dt <= 0:
            raise InvalidInputError("MpcConfig needs N >= 1 and dt > 0")
        for name in ("W_u", "W_epsi", "W_ey", "W_sh", "W_v", "W_zeta", "W_J", "W_box"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class ReferenceHorizon:
    curvature: np.ndarray
    speed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "curvature", np.asarray(self.curvature, dtype=float))
        object.__setattr__(self, "speed", np.asarray(self.speed, dtype=float))
        if self.curvature.shape != self.speed.shape:
            raise InvalidInputError("curvature and speed horizons differ in length")

    def __len__(self) -> int:
        return len(self.curvature)


# -- vehicle model -------------------------------------------------------------


def _arr(state) -> np.ndarray:
    return state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)


def tire_forces(state, params: VehicleParams) -> tuple[float, float]:
    """Linear-tire lateral forces at the front and rear axle."""
    s = _arr(state)
    U, V, r, delta = s[IU], s[IV], s[IR], s[IDELTA]
    if U <= params.U_min:
        raise LowSpeedError(f"U={U:.3f} m/s is below U_min={params.U_min}")
    alpha_f = (V + params.l_f * r) / U - delta
    alpha_r = (V - params.l_r * r) / U
    return -params.C_af * alpha_f, -params.C_ar * alpha_r


def dynamics(state, u, kappa_ref: float, params: VehicleParams) -> np.ndarray:
    """Time derivative of the 10-state dynamic bicycle model.

    Raises :class:`LowSpeedError` below ``params.U_min``; use
    :func:`vehicle_derivative` for the switching model.
    """
    s = _arr(state)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    Fyf, Fyr = tire_forces(s, params)
    _, _, psi, U, V, r, _, ax, _, epsi = s
    c, sn = math.cos(psi), math.sin(psi)
    return np.array([
        U * c - V * sn,
        U * sn + V * c,
        r,
        ax,
        (Fyf + Fyr) / params.M - U * r,
        (Fyf * params.l_f - Fyr * params.l_r) / params.I_zz,
        uu[0],
        uu[1],
        U * epsi + V,
        r - U * kappa_ref,
    ])


def kinematic_dynamics(state, u, kappa_ref: float, params: VehicleParams) -> np.ndarray:
    """Low-speed kinematic bicycle: yaw rate and lateral speed follow the steering geometry."""
    s = _arr(state)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    _, _, psi, U, V, r, delta, ax, _, epsi = s
    L = params.wheelbase
    tan_d = math.tan(delta)
    r_kin = U * tan_d / L
    v_kin = params.l_r * r_kin
    r_kin_dot = (ax * tan_d + U * uu[0] / math.cos(delta) ** 2) / L
    k = params.kin_relax
    c, sn = math.cos(psi), math.sin(psi)
    return np.array([
        U * c - V * sn,
        U * sn + V * c,
        r,
        ax,
        params.l_r * r_kin_dot + k * (v_kin - V),
        r_kin_dot + k * (r_kin - r),
        uu[0],
        uu[1],
        U * epsi + V,
        r - U * kappa_ref,
    ])


def vehicle_derivative(state, u, kappa_ref: float, params: VehicleParams) -> np.ndarray:
    s = _arr(state)
    if s[IU] > params.U_min:
        return dynamics(s, u, kappa_ref, params)
    d = kinematic_dynamics(s, u, kappa_ref, params)
    if s[IU] <= 0.0 and d[IU] < 0.0:
        d[IU] = 0.0  # no reversing
    return d


def dynamics_jacobians(state, u, kappa_ref: float, params: VehicleParams):
    """Analytic ``(df/dx, df/du)`` of :func:`dynamics`; finite differences in the kinematic regime."""
    s = _arr(state)
    if s[IU] <= params.U_min:
        return _fd_jacobians(s, np.asarray(u if not isinstance(u, ControlInput) else u.as_array(), float),
                             kappa_ref, params)
    _, _, psi, U, V, r, delta, ax, _, epsi = s
    p = params
    c, sn = math.cos(psi), math.sin(psi)
    A = np.zeros((NX, NX))
    A[IX, IPSI] = -U * sn - V * c
    A[IX, IU] = c
    A[IX, IV] = -sn
    A[IY, IPSI] = U * c - V * sn
    A[IY, IU] = sn
    A[IY, IV] = c
    A[IPSI, IR] = 1.0
    A[IU, IAX] = 1.0
    dFf = {
        IU: p.C_af * (V + p.l_f * r) / U**2,
        IV: -p.C_af / U,
        IR: -p.C_af * p.l_f / U,
        IDELTA: p.C_af,
    }
    dFr = {
        IU: p.C_ar * (V - p.l_r * r) / U**2,
        IV: -p.C_ar / U,
        IR: p.C_ar * p.l_r / U,
        IDELTA: 0.0,
    }
    for k in (IU, IV, IR, IDELTA):
        A[IV, k] = (dFf[k] + dFr[k]) / p.M
        A[IR, k] = (dFf[k] * p.l_f - dFr[k] * p.l_r) / p.I_zz
    A[IV, IU] -= r
    A[IV, IR] -= U
    A[IEY, IU] = epsi
    A[IEY, IEPSI] = U
    A[IEY, IV] = 1.0
    A[IEPSI, IR] = 1.0
    A[IEPSI, IU] = -kappa_ref
    B = np.zeros((NX, NU))
    B[IDELTA, 0] = 1.0
    B[IAX, 1] = 1.0
    return A, B


def _fd_jacobians(s, u, kappa, params, h=1e-6):
    A = np.zeros((NX, NX))
    B = np.zeros((NX, NU))
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = h
        A[:, i] = (vehicle_derivative(s + e, u, kappa, params) - vehicle_derivative(s - e, u, kappa, params)) / (2 * h)
    for i in range(NU):
        e = np.zeros(NU)
        e[i] = h
        B[:, i] = (vehicle_derivative(s, u + e, kappa, params) - vehicle_derivative(s, u - e, kappa, params)) / (2 * h)
    return A, B


def rk4_step(state, u, kappa_ref: float, dt: float, params: VehicleParams, deriv=None) -> np.ndarray:
    f = deriv or vehicle_derivative
    s = _arr(state)
    k1 = f(s, u, kappa_ref, params)
    k2 = f(s + 0.5 * dt * k1, u, kappa_ref, params)
    k3 = f(s + 0.5 * dt * k2, u, kappa_ref, params)
    k4 = f(s + dt * k3, u, kappa_ref, params)
    out = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[IU] = max(out[IU], 0.0)
    return out


def integrate(state, u, kappa_ref: float, dt: float, params: VehicleParams, max_substep: float = 0.005) -> np.ndarray:
    """RK4 over ``dt`` split into equal substeps; the lateral tire modes are too stiff for one step."""
    n = max(1, int(math.ceil(dt / max_substep - 1e-9)))
    h = dt / n
    s = _arr(state).copy()
    for _ in range(n):
        s = rk4_step(s, u, kappa_ref, h, params)
    return s


def discretize(Ac: np.ndarray, Bc: np.ndarray, dt: float):
    """Zero-order-hold discretisation through the augmented matrix exponential."""
    n, m = Bc.shape
    Maug = np.zeros((n + m, n + m))
    Maug[:n, :n] = Ac * dt
    Maug[:n, n:] = Bc * dt
    E = expm(Maug)
    return E[:n, :n], E[:n, n:]


def clip_input(u: np.ndarray, params: VehicleParams) -> np.ndarray:
    return np.array([
        min(max(u[0], -params.zeta_max), params.zeta_max),
        min(max(u[1], -params.J_max), params.J_max),
    ])


def admissible_input(state, u, dt: float, params: VehicleParams) -> ControlInput:
    """Clip ``u`` to its box and so that one step keeps ``delta_f`` and ``a_x`` inside theirs."""
    s = _arr(state)
    z, j = clip_input(np.asarray(u, dtype=float), params)
    z = min(max(z, (-params.delta_max - s[IDELTA]) / dt), (params.delta_max - s[IDELTA]) / dt)
    j = min(max(j, (-params.a_max - s[IAX]) / dt), (params.a_max - s[IAX]) / dt)
    z = min(max(z, -params.zeta_max), params.zeta_max)
    j = min(max(j, -params.J_max), params.J_max)
    return ControlInput(float(z), float(j))


# -- MPC --------------------------------------------------------------------------


@dataclass
class MpcProblem:
    """Condensed quadratic program built by linearising along a nominal rollout.

    Every cost term is a weighted square (or a squared hinge) of an affine map
    ``G @ u + o`` of the stacked inputs ``u = [zeta_0, J_0, zeta_1, J_1, ...]``.
    """

    x0: np.ndarray
    u_nom: np.ndarray  # (N, 2)
    x_nom: np.ndarray  # (N+1, NX)
    A: np.ndarray  # (N, NX, NX) discrete
    B: np.ndarray  # (N, NX, NU)
    Gamma: np.ndarray  # (N+1, NX, N*NU) sensitivity of x_k to u
    terms: list
    lower: np.ndarray
    upper: np.ndarray
    cfg: MpcConfig
    params: VehicleParams
    ref: ReferenceHorizon

    def predict(self, u_flat: np.ndarray) -> np.ndarray:
        du = u_flat - self.u_nom.reshape(-1)
        return self.x_nom + self.Gamma @ du

    def __post_init__(self):
        self._G = np.vstack([t[0] for t in self.terms])
        self._o = np.concatenate([t[1] for t in self.terms])
        self._w = np.concatenate([t[2] for t in self.terms])
        self._thr = np.concatenate([np.full(len(t[1]), -1.0 if t[3] is None else t[3]) for t in self.terms])
        self._hinge = self._thr >= 0

    def _residual(self, u_flat):
        v = self._G @ u_flat + self._o
        return np.where(self._hinge, np.sign(v) * np.maximum(np.abs(v) - self._thr, 0.0), v)

    def cost(self, u_flat: np.ndarray) -> float:
        r = self._residual(np.asarray(u_flat, dtype=float))
        return float(self._w @ (r * r))

    def gradient(self, u_flat: np.ndarray) -> np.ndarray:
        r = self._residual(np.asarray(u_flat, dtype=float))
        return 2.0 * self._G.T @ (self._w * r)

    def cost_and_gradient(self, u_flat: np.ndarray) -> tuple[float, np.ndarray]:
        r = self._residual(np.asarray(u_flat, dtype=float))
        wr = self._w * r
        return float(wr @ r), 2.0 * self._G.T @ wr

    def hessian_bound(self) -> np.ndarray:
        """Hessian of the cost with every hinge active (an upper bound in the PSD order)."""
        return 2.0 * self._G.T @ (self._w[:, None] * self._G)

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian_bound())[-1])

    def slack(self, u_flat: np.ndarray) -> np.ndarray:
        ey = self.predict(u_flat)[1:, IEY]
        return np.maximum(np.abs(ey) - self.cfg.e_max, 0.0)


def build_problem(state, ref: ReferenceHorizon, cfg: MpcConfig, params: VehicleParams, u_warm=None) -> MpcProblem:
    N, dt = cfg.N, cfg.dt
    if len(ref) != N:
        raise InvalidInputError(f"reference horizon has {len(ref)} steps, expected {N}")
    x0 = _arr(state).copy()
    u_nom = np.zeros((N, NU)) if u_warm is None else np.array(u_warm, dtype=float).reshape(N, NU)
    for k in range(N):
        u_nom[k] = clip_input(u_nom[k], params)
    x_nom = np.zeros((N + 1, NX))
    x_nom[0] = x0
    A = np.zeros((N, NX, NX))
    B = np.zeros((N, NX, NU))
    for k in range(N):
        xk = x_nom[k]
        Ac, Bc = dynamics_jacobians(xk, u_nom[k], ref.curvature[k], params)
        A[k], B[k] = discretize(Ac, Bc, dt)
        x_nom[k + 1] = integrate(xk, u_nom[k], ref.curvature[k], dt, params, cfg.rollout_substep)
    nz = N * NU
    Gamma = np.zeros((N + 1, NX, nz))
    for k in range(N):
        Gamma[k + 1] = A[k] @ Gamma[k]
        Gamma[k + 1][:, k * NU:(k + 1) * NU] += B[k]
    u_nom_flat = u_nom.reshape(-1)

    def rows(idx):
        G = Gamma[1:, idx, :]
        o = x_nom[1:, idx] - G @ u_nom_flat
        return G, o

    ones = np.ones(N)
    terms = []
    G_d, o_d = rows(IDELTA)
    G_prev = np.vstack([np.zeros((1, nz)), G_d[:-1]])
    o_prev = np.concatenate([[x0[IDELTA]], o_d[:-1]])
    terms.append((G_d - G_prev, o_d - o_prev, cfg.W_u * ones, None))
    G, o = rows(IEPSI)
    terms.append((G, o, cfg.W_epsi * ones, None))
    G_ey, o_ey = rows(IEY)
    terms.append((G_ey, o_ey, cfg.W_ey * ones, None))
    terms.append((G_ey, o_ey, cfg.W_sh * ones, cfg.e_max))
    G, o = rows(IU)
    terms.append((G, o - ref.speed, cfg.W_v * ones, None))
    terms.append((G_d, o_d, cfg.W_box * ones, params.delta_max))
    G, o = rows(IAX)
    terms.append((G, o, cfg.W_box * ones, params.a_max))
    eye = np.eye(nz)
    terms.append((eye[0::2], np.zeros(N), cfg.W_zeta * ones, None))
    terms.append((eye[1::2], np.zeros(N), cfg.W_J * ones, None))
    lower = np.tile([-params.zeta_max, -params.J_max], N)
    upper = np.tile([params.zeta_max, params.J_max], N)
    return MpcProblem(x0, u_nom, x_nom, A, B, Gamma, terms, lower, upper, cfg, params, ref)


@dataclass
class MpcResult:
    input: ControlInput
    sequence: np.ndarray  # (N, 2)
    predicted: np.ndarray  # (N+1, NX)
    cost: float
    iterations: int
    feasible: bool = True
    max_slack: float = 0.0
    safe_stop: bool = False
    diagnostics: dict = field(default_factory=dict)


def solve_problem(problem: MpcProblem, iterations: int | None = None) -> tuple[np.ndarray, float, int]:
    """Diagonally scaled FISTA with backtracking over the input box.

    The cost is convex (quadratics plus squared hinges of affine maps), so the
    iteration converges to the box-constrained optimum.  The best iterate seen
    is returned, which is never worse than the warm start or the zero sequence.
    """
    iters = problem.cfg.iterations if iterations is None else iterations
    H = problem.hessian_bound()
    d = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-9))
    lo, hi = problem.lower / d, problem.upper / d

    def f(z):
        return problem.cost(d * z)

    def f_grad(z):
        c, g = problem.cost_and_gradient(d * z)
        return c, d * g

    best_u, best_c = np.zeros_like(lo), math.inf
    for c in (np.clip(problem.u_nom.reshape(-1), problem.lower, problem.upper), np.zeros_like(lo)):
        val = problem.cost(c)
        if val < best_c:
            best_u, best_c = c.copy(), val
    x = best_u / d
    y = x.copy()
    t = 1.0
    L = 1.0
    for _ in range(iters):
        fy, gy = f_grad(y)
        while True:
            x_new = np.clip(y - gy / L, lo, hi)
            diff = x_new - y
            f_new = f(x_new)
            if f_new <= fy + gy @ diff + 0.5 * L * (diff @ diff) + 1e-12 * max(1.0, abs(fy)) or L > 1e12:
                break
            L *= 2.0
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if f_new < best_c:
            best_u, best_c = d * x, f_new
        L = max(L * 0.9, 1e-6)
    return best_u, best_c, iters


def mpc_step(state, ref: ReferenceHorizon, cfg: MpcConfig, params: VehicleParams, prev_input=None) -> MpcResult:
    """One receding-horizon solve; returns the first admissible input of the optimum.

    ``prev_input`` may be an ``(N, 2)`` warm-start sequence (typically the
    previous solution shifted by one step) or ``None``.
    """
    problem = build_problem(state, ref, cfg, params, prev_input)
    u, cost, iters = solve_problem(problem)
    seq = u.reshape(cfg.N, NU)
    slack = problem.slack(u)
    max_slack = float(slack.max()) if slack.size else 0.0
    s = _arr(state)
    if not np.isfinite(cost) or max_slack > cfg.slack_max:
        stop = ControlInput(0.0, admissible_input(s, [0.0, -params.J_max], cfg.dt, params).J_x)
        return MpcResult(stop, seq, problem.predict(u), cost, iters, feasible=False, max_slack=max_slack,
                         safe_stop=True, diagnostics={"reason": "corridor infeasible even with slack"})
    first = admissible_input(s, seq[0], cfg.dt, params)
    return MpcResult(first, seq, problem.predict(u), cost, iters, True, max_slack)


class MpcController:
    """Stateful wrapper keeping the shifted previous solution as warm start."""

    name = "mpc"

    def __init__(self, cfg: MpcConfig | None = None, params: VehicleParams | None = None):
        self.cfg = cfg or MpcConfig()
        self.params = params or VehicleParams()
        self._warm = None
        self.last: MpcResult | None = None

    def reset(self):
        self._warm = None

    def step(self, state: VehicleState, path, target_speed: float, hint=None):
        ref = reference_horizon(path, state, target_speed, self.cfg, hint)
        res = mpc_step(state, ref, self.cfg, self.params, self._warm)
        self._warm = np.vstack([res.sequence[1:], res.sequence[-1:]])
        self.last = res
        return res.input, {"cost": res.cost, "iterations": res.iterations, "safe_stop": res.safe_stop}


def reference_horizon(path, state: VehicleState, target_speed: float, cfg: MpcConfig, s0: float | None = None):
    """Curvature and speed references at the arc positions the vehicle is predicted to reach."""
    if s0 is None:
        s0, _, _, _ = path.project(state.x, state.y)
    v = max(state.U, 0.5)
    s = np.empty(cfg.N)
    pos = s0
    for k in range(cfg.N):
        pos += v * cfg.dt
        v = v + 0.5 * (target_speed - v)
        s[k] = pos
    return ReferenceHorizon(path.curvature_at_s(s), np.full(cfg.N, float(target_speed)))


# -- pure pursuit ----------------------------------------------------------------


def pure_pursuit_step(state, path, lookahead: float, params: VehicleParams, hint: int | None = None) -> float:
    """Geometric pure-pursuit steering angle toward the point ``lookahead`` metres ahead on the path."""
    if path is None or len(path) == 0:
        raise InvalidInputError("empty path")
    if lookahead <= 0:
        raise InvalidInputError("lookahead must be positive")
    s = state if isinstance(state, VehicleState) else VehicleState.from_array(state)
    s_near, _, _, _ = path.project(s.x, s.y, hint)
    gx, gy = path.point_at_s(s_near + lookahead)
    dx, dy = gx - s.x, gy - s.y
    alpha = math.atan2(dy, dx) - s.psi
    delta = math.atan(2.0 * params.wheelbase * math.sin(alpha) / lookahead)
    return float(min(max(delta, -params.delta_max), params.delta_max))


@dataclass(frozen=True)
class PurePursuitConfig:
    lookahead: float = 4.0
    lookahead_gain: float = 0.0
    a_lat_max: float = 4.0
    preview: float = 8.0
    k_speed: float = 1.5
    dt: float = 0.05


class PurePursuitController:
    """Pure pursuit steering plus a curvature-limited proportional speed loop."""

    name = "pure_pursuit"

    def __init__(self, cfg: PurePursuitConfig | None = None, params: VehicleParams | None = None):
        self.cfg = cfg or PurePursuitConfig()
        self.params = params or VehicleParams()

    def reset(self):
        pass

    def step(self, state: VehicleState, path, target_speed: float, hint=None):
        c, p = self.cfg, self.params
        ld = c.lookahead + c.lookahead_gain * state.U
        delta_cmd = pure_pursuit_step(state, path, ld, p)
        s0, _, _, _ = path.project(state.x, state.y)
        ks = np.abs(path.curvature_at_s(s0 + np.linspace(0.0, c.preview, 9)))
        kmax = float(ks.max())
        v_target = target_speed if kmax < 1e-6 else min(target_speed, math.sqrt(c.a_lat_max / kmax))
        a_cmd = min(max(c.k_speed * (v_target - state.U), -p.a_max), p.a_max)
        zeta = (delta_cmd - state.delta_f) / c.dt
        jerk = (a_cmd - state.a_x) / c.dt
        u = admissible_input(state, [zeta, jerk], c.dt, p)
        return u, {"cost": 0.0, "iterations": 0, "safe_stop": False}
