"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np

SAMPLE_STEP = 1e-3


def march_ray(origin, direction, scene, target_xz, max_range, step=SAMPLE_STEP):
    """Walk the ray in fixed increments and report the first sample inside anything.

    Returns ``(tag, distance)`` with tag in {"wall", "target", None}. A sample
    inside both the target and solid geometry counts as the target.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t = np.arange(0.0, max_range + step / 2, step)
    p = o[None, :] + t[:, None] * d[None, :]
    h = scene.half_extent
    solid = (np.abs(p[:, 0]) >= h) | (np.abs(p[:, 1]) >= h)
    lo, hi = scene.box_bounds
    for k in range(lo.shape[0]):
        solid |= np.all((p >= lo[k]) & (p <= hi[k]), axis=1)
    in_target = np.hypot(p[:, 0] - target_xz[0], p[:, 1] - target_xz[1]) <= scene.target_radius
    hit = solid | in_target
    if not hit.any():
        return None, None
    i = int(np.argmax(hit))
    return ("target" if in_target[i] else "wall"), float(t[i])


def discounted_returns_quadratic(rewards, terminal_value, discount):
    """G_t = sum_{t' >= t} discount^(t'-t) r_t' + discount^(T-t) * terminal_value, term by term."""
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        total = 0.0
        for k in range(t, T):
            total += discount ** (k - t) * rewards[k]
        total += discount ** (T - t) * terminal_value
        out[t] = total
    return out


def central_difference(f, arrays, h=1e-4):
    """Numerical gradient of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = f()
            a[idx] = old - h
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest |a - n| / max(|a| + |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def expected_episode_return(length, success, max_step):
    """Closed-form cumulative extrinsic reward of one episode."""
    if success:
        return 5.0 - (length - 1) / max_step
    return -1.0


def random_ray_cases(scene, n, rng):
    """``n`` random (origin, unit direction, target) triples inside the free space.

    Half of the directions point at the target so target hits are common.
    """
    h = scene.half_extent - scene.agent_radius
    cases = []
    while len(cases) < n:
        o = rng.uniform(-h, h, 2)
        tgt = rng.uniform(-h, h, 2)
        if any(b.distance_xz(o[0], o[1]) < scene.agent_radius for b in scene.obstacles):
            continue
        if np.hypot(*(o - tgt)) <= scene.contact_distance:
            continue
        if rng.random() < 0.5:
            d = tgt - o + rng.normal(0.0, 0.3, 2)
        else:
            d = rng.normal(size=2)
        cases.append((o, d / np.linalg.norm(d), tgt))
    return cases


def ray_oracle_mismatches(scene, cases, max_range, cast_ray):
    """Cases where ``cast_ray`` and :func:`march_ray` disagree on tag or on distance by > one step."""
    bad = []
    for o, d, tgt in cases:
        got = cast_ray(o, d, scene, tgt, max_range)
        tag, dist = march_ray(o, d, scene, tgt, max_range)
        got_tag = "target" if got.tag_target else "wall" if got.tag_wall else None
        if got_tag != tag:
            bad.append((o, d, tgt, got, tag, dist))
        elif tag is not None and abs(got.distance_frac * max_range - dist) > SAMPLE_STEP + 1e-9:
            bad.append((o, d, tgt, got, tag, dist))
    return bad
