"""Compiled inner loops shared by the world, dynamics, belief and planner modules.

Everything here works on flat numpy arrays so that numba can compile it in
nopython mode.  Layouts:

* ``bounds``  -- float64[6]: xmin, xmax, ymin, ymax, zmin, zmax
* ``boxes``   -- float64[B, 6]: same layout per obstacle box (closed)
* ``grid``    -- float64[5]: x0, y0, cell side, n columns, n rows
* ``params``  -- float64[P]: see the ``P_*`` indices below
* ``rewards`` -- float64[10]: see the ``R_*`` indices below
"""

import math

import numpy as np
from numba import njit

FORWARD, BACKWARD, GO_LEFT, GO_RIGHT, GO_UP, GO_DOWN, TURN_LEFT, TURN_RIGHT, HOVER = range(9)

P_VX, P_VY, P_VZ, P_VPSI, P_TF = 0, 1, 2, 3, 4
P_SIGMA_T, P_SIGMA_PSI = 5, 6
P_TAN_X, P_TAN_Y, P_PD_NEAR, P_PD_FAR, P_Z_NEAR, P_Z_FAR = 7, 8, 9, 10, 11, 12
P_MAX_RANGE, P_DXC, P_DYC, P_DZC = 13, 14, 15, 16
P_GAMMA, P_UCB_C, P_SIM_AVOID = 17, 18, 19
P_LEAF = 20
N_PARAMS = 21

R_DETECT, R_NEW_GRID, R_OBSTACLE, R_OUT_OF_ZONE = 0, 1, 2, 3
R_FORWARD, R_TURN, R_UPDOWN, R_HOVER, R_AVOID_LATERAL, R_AVOID_VERTICAL = 4, 5, 6, 7, 8, 9
N_REWARDS = 10

N_RANGE_BUCKETS = 5
N_OBS_KEYS = 10 * 2 * N_RANGE_BUCKETS

TWO_PI = 2.0 * math.pi
INF = np.inf

# ---------------------------------------------------------------- random


_MASK64 = (1 << 64) - 1


def seed_state(seed):
    """Expand an integer seed into a xoshiro256** state vector (splitmix64)."""
    x = int(seed) & _MASK64
    out = []
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return np.array(out, dtype=np.uint64)


@njit(cache=True, nogil=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True, nogil=True)
def rand_u64(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True, nogil=True)
def rand_uniform(s):
    return float(rand_u64(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def rand_int(s, n):
    return int(rand_uniform(s) * n) % n


@njit(cache=True, nogil=True)
def rand_normal(s):
    u1 = rand_uniform(s)
    while u1 <= 0.0:
        u1 = rand_uniform(s)
    u2 = rand_uniform(s)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(TWO_PI * u2)


# ---------------------------------------------------------------- geometry


@njit(cache=True, nogil=True)
def wrap_angle(a):
    """Map an angle onto (-pi, pi]."""
    return math.pi - ((math.pi - a) % TWO_PI)


@njit(cache=True, nogil=True)
def point_occupied(bounds, boxes, x, y, z):
    if x < bounds[0] or x > bounds[1] or y < bounds[2] or y > bounds[3]:
        return True
    if z < bounds[4] or z > bounds[5]:
        return True
    for k in range(boxes.shape[0]):
        b = boxes[k]
        if b[0] <= x <= b[1] and b[2] <= y <= b[3] and b[4] <= z <= b[5]:
            return True
    return False


@njit(cache=True, nogil=True)
def out_of_bounds(bounds, x, y, z):
    return (x < bounds[0] or x > bounds[1] or y < bounds[2] or y > bounds[3]
            or z < bounds[4] or z > bounds[5])


@njit(cache=True, nogil=True)
def inside_boxes(boxes, x, y, z):
    for k in range(boxes.shape[0]):
        b = boxes[k]
        if b[0] <= x <= b[1] and b[2] <= y <= b[3] and b[4] <= z <= b[5]:
            return True
    return False


@njit(cache=True, nogil=True)
def in_footprint_2d(boxes, x, y):
    for k in range(boxes.shape[0]):
        b = boxes[k]
        if b[0] <= x <= b[1] and b[2] <= y <= b[3]:
            return True
    return False


@njit(cache=True, nogil=True)
def ray_box(b, ox, oy, oz, dx, dy, dz):
    """Entry distance of a ray into a closed box, or inf when it misses."""
    t0 = -INF
    t1 = INF
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for ax in range(3):
        lo = b[2 * ax]
        hi = b[2 * ax + 1]
        if abs(d[ax]) < 1e-15:
            if o[ax] < lo or o[ax] > hi:
                return INF
        else:
            ta = (lo - o[ax]) / d[ax]
            tb = (hi - o[ax]) / d[ax]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return INF
    if t1 < 0.0:
        return INF
    return max(t0, 0.0)


@njit(cache=True, nogil=True)
def ray_exit_bounds(bounds, ox, oy, oz, dx, dy, dz):
    t = INF
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for ax in range(3):
        if d[ax] > 1e-15:
            ta = (bounds[2 * ax + 1] - o[ax]) / d[ax]
            if ta < t:
                t = ta
        elif d[ax] < -1e-15:
            ta = (bounds[2 * ax] - o[ax]) / d[ax]
            if ta < t:
                t = ta
    return t


@njit(cache=True, nogil=True)
def raycast(bounds, boxes, ox, oy, oz, dx, dy, dz, max_range):
    if point_occupied(bounds, boxes, ox, oy, oz):
        return 0.0
    t = ray_exit_bounds(bounds, ox, oy, oz, dx, dy, dz)
    for k in range(boxes.shape[0]):
        tb = ray_box(boxes[k], ox, oy, oz, dx, dy, dz)
        if tb < t:
            t = tb
    if t > max_range:
        return max_range
    return t


@njit(cache=True, nogil=True)
def body_ranges(bounds, boxes, x, y, z, psi, max_range, out):
    """Front, back, left, right and up ranges from a pose."""
    c = math.cos(psi)
    s = math.sin(psi)
    out[0] = raycast(bounds, boxes, x, y, z, c, s, 0.0, max_range)
    out[1] = raycast(bounds, boxes, x, y, z, -c, -s, 0.0, max_range)
    out[2] = raycast(bounds, boxes, x, y, z, -s, c, 0.0, max_range)
    out[3] = raycast(bounds, boxes, x, y, z, s, -c, 0.0, max_range)
    out[4] = raycast(bounds, boxes, x, y, z, 0.0, 0.0, 1.0, max_range)


@njit(cache=True, nogil=True)
def batch_ranges(bounds, boxes, poses, max_range):
    n = poses.shape[0]
    out = np.empty((n, 5))
    for i in range(n):
        body_ranges(bounds, boxes, poses[i, 0], poses[i, 1], poses[i, 2], poses[i, 3],
                    max_range, out[i])
    return out


@njit(cache=True, nogil=True)
def segment_clear(boxes, ax, ay, az, bx, by, bz):
    """True when the open segment a->b touches no box."""
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length == 0.0:
        return not inside_boxes(boxes, ax, ay, az)
    dx /= length
    dy /= length
    dz /= length
    for k in range(boxes.shape[0]):
        t = ray_box(boxes[k], ax, ay, az, dx, dy, dz)
        if t < length - 1e-12:
            return False
    return True


# ---------------------------------------------------------------- grid


@njit(cache=True, nogil=True)
def cell_index(grid, x, y):
    nx = int(grid[3])
    ny = int(grid[4])
    col = int(math.floor((x - grid[0]) / grid[2]))
    row = int(math.floor((y - grid[1]) / grid[2]))
    if col >= nx:
        col = nx - 1
    if row >= ny:
        row = ny - 1
    if col < 0:
        col = 0
    if row < 0:
        row = 0
    return row * nx + col


@njit(cache=True, nogil=True)
def covered_cells(grid, x, y, z, psi, tan_x, tan_y, out):
    """Cells whose centre lies in the camera footprint; returns the count written to out."""
    hx = max(z, 0.0) * tan_x
    hy = max(z, 0.0) * tan_y
    r = math.sqrt(hx * hx + hy * hy)
    nx = int(grid[3])
    ny = int(grid[4])
    cell = grid[2]
    c0 = max(int(math.floor((x - r - grid[0]) / cell - 0.5)), 0)
    c1 = min(int(math.ceil((x + r - grid[0]) / cell - 0.5)), nx - 1)
    r0 = max(int(math.floor((y - r - grid[1]) / cell - 0.5)), 0)
    r1 = min(int(math.ceil((y + r - grid[1]) / cell - 0.5)), ny - 1)
    c = math.cos(psi)
    s = math.sin(psi)
    n = 0
    for row in range(r0, r1 + 1):
        cy = grid[1] + (row + 0.5) * cell
        for col in range(c0, c1 + 1):
            cx = grid[0] + (col + 0.5) * cell
            ddx = cx - x
            ddy = cy - y
            bx = c * ddx + s * ddy
            by = -s * ddx + c * ddy
            if abs(bx) <= hx and abs(by) <= hy:
                if n < out.shape[0]:
                    out[n] = row * nx + col
                    n += 1
    return n


# ---------------------------------------------------------------- dynamics


@njit(cache=True, nogil=True)
def step_pose(x, y, z, psi, action, params, nx, ny, npsi):
    """One kinematic step; noise terms are body-frame x/y metres and yaw radians."""
    d = params[P_VX] * params[P_TF]
    bx = 0.0
    by = 0.0
    dz = 0.0
    dpsi = 0.0
    if action == FORWARD:
        bx = d
    elif action == BACKWARD:
        bx = -d / 2.0
    elif action == GO_LEFT:
        by = params[P_VY] * params[P_TF]
    elif action == GO_RIGHT:
        by = -params[P_VY] * params[P_TF]
    elif action == GO_UP:
        dz = params[P_VZ] * params[P_TF]
    elif action == GO_DOWN:
        dz = -params[P_VZ] * params[P_TF]
    elif action == TURN_LEFT:
        dpsi = params[P_VPSI] * params[P_TF]
    elif action == TURN_RIGHT:
        dpsi = -params[P_VPSI] * params[P_TF]
    heading = psi + npsi
    c = math.cos(heading)
    s = math.sin(heading)
    ex = bx + nx
    ey = by + ny
    return (x + c * ex - s * ey, y + s * ex + c * ey, z + dz, wrap_angle(psi + dpsi + npsi))


@njit(cache=True, nogil=True)
def detection_prob(params, z):
    if z <= params[P_Z_NEAR]:
        return params[P_PD_NEAR]
    if z >= params[P_Z_FAR]:
        return params[P_PD_FAR]
    f = (z - params[P_Z_NEAR]) / (params[P_Z_FAR] - params[P_Z_NEAR])
    return params[P_PD_NEAR] + f * (params[P_PD_FAR] - params[P_PD_NEAR])


@njit(cache=True, nogil=True)
def image_offset(params, x, y, z, psi, tx, ty):
    """Normalised (u, v) of a ground point in the downward camera frame."""
    hx = z * params[P_TAN_X]
    hy = z * params[P_TAN_Y]
    if hx <= 0.0 or hy <= 0.0:
        return INF, INF
    ddx = tx - x
    ddy = ty - y
    c = math.cos(psi)
    s = math.sin(psi)
    return (c * ddx + s * ddy) / hx, (-s * ddx + c * ddy) / hy


@njit(cache=True, nogil=True)
def target_in_frame(boxes, params, x, y, z, psi, tx, ty):
    u, v = image_offset(params, x, y, z, psi, tx, ty)
    if abs(u) > 1.0 or abs(v) > 1.0:
        return False
    return segment_clear(boxes, x, y, z, tx, ty, 0.0)


@njit(cache=True, nogil=True)
def batch_in_frame(boxes, params, poses, targets):
    n = poses.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        out[i] = target_in_frame(boxes, params, poses[i, 0], poses[i, 1], poses[i, 2],
                                 poses[i, 3], targets[i, 0], targets[i, 1])
    return out


@njit(cache=True, nogil=True)
def offset_bucket(u, v):
    """1..9 for a 3x3 split of the image, row-major from (-1, -1)."""
    iu = 0 if u < -1.0 / 3.0 else (2 if u > 1.0 / 3.0 else 1)
    iv = 0 if v < -1.0 / 3.0 else (2 if v > 1.0 / 3.0 else 1)
    return 1 + iv * 3 + iu


@njit(cache=True, nogil=True)
def range_bucket(front, max_range):
    if front < 0.5:
        return 0
    if front < 1.0:
        return 1
    if front < 2.0:
        return 2
    if front < max_range:
        return 3
    return 4


@njit(cache=True, nogil=True)
def obs_key(det_bucket, new_cell, rbucket):
    return (det_bucket * 2 + (1 if new_cell else 0)) * N_RANGE_BUCKETS + rbucket


# ---------------------------------------------------------------- planner model


@njit(cache=True, nogil=True)
def action_cost(rewards, action):
    if action == FORWARD:
        return rewards[R_FORWARD]
    if action == TURN_LEFT or action == TURN_RIGHT:
        return rewards[R_TURN]
    if action == GO_UP or action == GO_DOWN:
        return rewards[R_UPDOWN]
    if action == HOVER:
        return rewards[R_HOVER]
    return rewards[R_AVOID_LATERAL]


@njit(cache=True, nogil=True)
def _zone_ok(grid, zone, x, y):
    return zone[cell_index(grid, x, y)] != 0


@njit(cache=True, nogil=True)
def _sim_safety_action(bounds, boxes, params, x, y, z, psi, buf):
    """Reflex used inside simulation: the avoidance action for the closest range violation."""
    body_ranges(bounds, boxes, x, y, z, psi, params[P_MAX_RANGE], buf)
    limits = (params[P_DXC], params[P_DXC], params[P_DYC], params[P_DYC], params[P_DZC])
    best = -1
    best_r = INF
    for k in range(5):
        if buf[k] < limits[k] and buf[k] < best_r:
            best_r = buf[k]
            best = k
    if best == 0:
        return BACKWARD
    if best == 1:
        return GO_LEFT if buf[2] >= buf[3] else GO_RIGHT
    if best == 2:
        return GO_RIGHT
    if best == 3:
        return GO_LEFT
    if best == 4:
        return GO_DOWN
    return -1


@njit(cache=True, nogil=True)
def sim_step(state, action, bounds, boxes, grid, params, rewards, explored, zone,
             marked, n_marked, want_key, rng, buf, cells):
    """Advance a simulated (pose, target) state in place.

    Returns (reward, terminal, obs_key, n_marked).  ``explored`` is updated
    in place for newly covered cells and their indices are appended to
    ``marked`` so the caller can roll them back after the simulation.
    """
    x, y, z, psi = state[0], state[1], state[2], state[3]
    tx, ty = state[4], state[5]
    was_in_zone = _zone_ok(grid, zone, x, y)
    nx = rand_normal(rng) * params[P_SIGMA_T]
    ny = rand_normal(rng) * params[P_SIGMA_T]
    npsi = rand_normal(rng) * params[P_SIGMA_PSI]
    x0, y0, z0 = x, y, z
    x, y, z, psi = step_pose(x, y, z, psi, action, params, nx, ny, npsi)
    reward = action_cost(rewards, action)
    # swept check: a step may not pass through a thin obstacle
    hit = not segment_clear(boxes, x0, y0, z0, x, y, z)

    if params[P_SIM_AVOID] != 0.0 and not hit and not point_occupied(bounds, boxes, x, y, z):
        reflex = _sim_safety_action(bounds, boxes, params, x, y, z, psi, buf)
        if reflex >= 0:
            nx = rand_normal(rng) * params[P_SIGMA_T]
            ny = rand_normal(rng) * params[P_SIGMA_T]
            npsi = rand_normal(rng) * params[P_SIGMA_PSI]
            x0, y0, z0 = x, y, z
            x, y, z, psi = step_pose(x, y, z, psi, reflex, params, nx, ny, npsi)
            hit = not segment_clear(boxes, x0, y0, z0, x, y, z)
            if reflex == GO_UP or reflex == GO_DOWN:
                reward += rewards[R_AVOID_VERTICAL]
            else:
                reward += rewards[R_AVOID_LATERAL]

    state[0] = x
    state[1] = y
    state[2] = z
    state[3] = psi
    if out_of_bounds(bounds, x, y, z) or (was_in_zone and not _zone_ok(grid, zone, x, y)):
        return reward + rewards[R_OUT_OF_ZONE], True, 0, n_marked
    if hit or inside_boxes(boxes, x, y, z):
        return reward + rewards[R_OBSTACLE], True, 0, n_marked

    n_cov = covered_cells(grid, x, y, z, psi, params[P_TAN_X], params[P_TAN_Y], cells)
    new_cell = False
    for k in range(n_cov):
        c = cells[k]
        if explored[c] == 0 and zone[c] != 0 and n_marked < marked.shape[0]:
            explored[c] = 1
            marked[n_marked] = c
            n_marked += 1
            reward += rewards[R_NEW_GRID]
            new_cell = True

    det_bucket = 0
    terminal = False
    u, v = image_offset(params, x, y, z, psi, tx, ty)
    if abs(u) <= 1.0 and abs(v) <= 1.0 and segment_clear(boxes, x, y, z, tx, ty, 0.0):
        if rand_uniform(rng) < detection_prob(params, z):
            reward += rewards[R_DETECT]
            terminal = True
            det_bucket = offset_bucket(u, v)

    key = 0
    if want_key:
        front = raycast(bounds, boxes, x, y, z, math.cos(psi), math.sin(psi), 0.0,
                        params[P_MAX_RANGE])
        key = obs_key(det_bucket, new_cell, range_bucket(front, params[P_MAX_RANGE]))
    return reward, terminal, key, n_marked


# ---------------------------------------------------------------- tree search


@njit(cache=True, nogil=True)
def leaf_value(state, grid, explored, zone, params, rewards):
    """Optimistic value beyond the depth limit: fly straight to the best reward.

    Candidates are the nearest unexplored in-zone cell centre (new-grid reward)
    and the hypothesised target (detection reward scaled by p_d), each
    discounted by the Forward steps needed to bring it under the footprint and
    charged the Forward cost on the way.
    """
    x, y, z = state[0], state[1], state[2]
    gamma = params[P_GAMMA]
    step = params[P_VX] * params[P_TF]
    reach = z * params[P_TAN_X]
    cost = rewards[R_FORWARD]
    best = 0.0
    nx = int(grid[3])
    for c in range(explored.shape[0]):
        if explored[c] != 0 or zone[c] == 0:
            continue
        cx = grid[0] + (c % nx + 0.5) * grid[2]
        cy = grid[1] + (c // nx + 0.5) * grid[2]
        d = math.sqrt((cx - x) ** 2 + (cy - y) ** 2) - reach
        k = max(d, 0.0) / step
        g = gamma ** k
        v = rewards[R_NEW_GRID] * g + cost * (1.0 - g) / (1.0 - gamma)
        if v > best:
            best = v
    d = math.sqrt((state[4] - x) ** 2 + (state[5] - y) ** 2) - reach
    g = gamma ** (max(d, 0.0) / step)
    v = detection_prob(params, z) * rewards[R_DETECT] * g + cost * (1.0 - g) / (1.0 - gamma)
    if v > best:
        best = v
    return best


@njit(cache=True, nogil=True)
def new_node(tree_i, key, sibling):
    n = tree_i[0, 0]
    tree_i[0, 0] = n + 1
    tree_i[1, n] = 0        # visits
    tree_i[2, n] = key
    tree_i[3, n] = sibling
    return n


@njit(cache=True, nogil=True)
def _select(node, act_n, act_sum, node_n, n_actions, c, lo, hi):
    for a in range(n_actions):
        if act_n[node, a] == 0:
            return a
    span = hi - lo
    logn = math.log(node_n[node])
    best = 0
    best_v = -INF
    for a in range(n_actions):
        q = act_sum[node, a] / act_n[node, a]
        qn = (q - lo) / span if span > 0.0 else 0.5
        v = qn + c * math.sqrt(logn / act_n[node, a])
        if v > best_v:
            best_v = v
            best = a
    return best


@njit(cache=True, nogil=True)
def _find_child(first_child, tree_i, node, a, key):
    ch = first_child[node, a]
    while ch >= 0:
        if tree_i[2, ch] == key:
            return ch
        ch = tree_i[3, ch]
    return -1


@njit(cache=True, nogil=True)
def run_simulations(root, n_sims, tree_i, first_child, act_n, act_sum, bounds_lohi,
                    actions, poses, targets, cumw, bounds, boxes, grid, params, rewards,
                    explored, zone, depth, rollout_depth, rng):
    """Run n_sims MCTS simulations from ``root``; returns the number of nodes added.

    Rollouts stop after ``rollout_depth`` steps (or at ``depth``), then the leaf
    value, when enabled, closes the return.

    ``tree_i`` rows: [0, 0] node count, [1] node visits, [2] obs key, [3] next sibling.
    ``bounds_lohi`` holds the running min/max return used to normalise UCB values.
    """
    n_actions = actions.shape[0]
    gamma = params[P_GAMMA]
    c = params[P_UCB_C]
    capacity = tree_i.shape[1]
    state = np.empty(6)
    path_node = np.empty(depth, dtype=np.int64)
    path_act = np.empty(depth, dtype=np.int64)
    path_r = np.empty(depth)
    marked = np.empty(depth * 16, dtype=np.int64)
    buf = np.empty(5)
    cells = np.empty(64, dtype=np.int64)
    node_n = tree_i[1]
    added = 0
    total = cumw[cumw.shape[0] - 1]
    for _ in range(n_sims):
        u = rand_uniform(rng) * total
        i = np.searchsorted(cumw, u, side='right')
        if i >= cumw.shape[0]:
            i = cumw.shape[0] - 1
        state[0] = poses[i, 0]
        state[1] = poses[i, 1]
        state[2] = poses[i, 2]
        state[3] = poses[i, 3]
        state[4] = targets[i, 0]
        state[5] = targets[i, 1]
        n_marked = 0
        node = root
        plen = 0
        tail = 0.0
        d = 0
        while d < depth:
            a = _select(node, act_n, act_sum, node_n, n_actions, c,
                        bounds_lohi[0], bounds_lohi[1])
            r, term, key, n_marked = sim_step(state, actions[a], bounds, boxes, grid, params,
                                              rewards, explored, zone, marked, n_marked,
                                              True, rng, buf, cells)
            path_node[plen] = node
            path_act[plen] = a
            path_r[plen] = r
            plen += 1
            d += 1
            if term:
                break
            if d >= depth:
                if params[P_LEAF] != 0.0:
                    tail = leaf_value(state, grid, explored, zone, params, rewards)
                break
            child = _find_child(first_child, tree_i, node, a, key)
            if child < 0:
                if tree_i[0, 0] < capacity:
                    child = new_node(tree_i, key, first_child[node, a])
                    first_child[child, :] = -1
                    act_n[child, :] = 0
                    act_sum[child, :] = 0.0
                    first_child[node, a] = child
                    added += 1
                    node_n[child] += 1
                # rollout from the freshly expanded state
                disc = 1.0
                term = False
                stop = min(depth, d + rollout_depth)
                while d < stop:
                    ra = actions[rand_int(rng, n_actions)]
                    r, term, key, n_marked = sim_step(state, ra, bounds, boxes, grid, params,
                                                      rewards, explored, zone, marked,
                                                      n_marked, False, rng, buf, cells)
                    tail += disc * r
                    disc *= gamma
                    d += 1
                    if term:
                        break
                if not term and params[P_LEAF] != 0.0:
                    tail += disc * leaf_value(state, grid, explored, zone, params, rewards)
                break
            node = child
        g = tail
        for k in range(plen - 1, -1, -1):
            g = path_r[k] + gamma * g
            nd = path_node[k]
            a = path_act[k]
            act_n[nd, a] += 1
            act_sum[nd, a] += g
            node_n[nd] += 1
            if g < bounds_lohi[0]:
                bounds_lohi[0] = g
            if g > bounds_lohi[1]:
                bounds_lohi[1] = g
        for k in range(n_marked):
            explored[marked[k]] = 0
    return added


@njit(cache=True, nogil=True)
def batch_step(poses, action, params, noise):
    """Advance every pose in place; ``noise`` rows are (x, y, yaw) already scaled."""
    for i in range(poses.shape[0]):
        x, y, z, psi = step_pose(poses[i, 0], poses[i, 1], poses[i, 2], poses[i, 3], action,
                                 params, noise[i, 0], noise[i, 1], noise[i, 2])
        poses[i, 0] = x
        poses[i, 1] = y
        poses[i, 2] = max(z, 0.0)
        poses[i, 3] = psi


@njit(cache=True, nogil=True)
def collision_fraction(poses, weights, action, params, noise, bounds, boxes):
    """Weighted share of poses whose noisy step under ``action`` ends or passes in an obstacle."""
    hit = 0.0
    for i in range(poses.shape[0]):
        x0, y0, z0 = poses[i, 0], poses[i, 1], poses[i, 2]
        x, y, z, psi = step_pose(x0, y0, z0, poses[i, 3], action, params, noise[i, 0],
                                 noise[i, 1], noise[i, 2])
        if (z <= 0.0 or point_occupied(bounds, boxes, x, y, z)
                or not segment_clear(boxes, x0, y0, z0, x, y, z)):
            hit += weights[i]
    return hit
