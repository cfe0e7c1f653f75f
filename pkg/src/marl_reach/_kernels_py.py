"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``."""
import numpy as np

P_BOUND, P_LO, P_HI = 0, 4, 7
P_TIP, P_OBJZ, P_CONTACT, P_FAR = 10, 11, 12, 13
P_STEPCOST, P_DSCALE, P_FARPEN, P_BONUS, P_MAXSTEPS = 14, 15, 16, 17, 18

TWO_PI = 2.0 * np.pi


def _wrap(x):
    return x - TWO_PI * np.ceil((x - np.pi) / TWO_PI)


def tip_distance(pose, obj, params):
    tip, objz = params[P_TIP], params[P_OBJZ]
    yaw, pit = pose[:, 3], pose[:, 4]
    sp = np.sin(pit)
    dx = pose[:, 0] + tip * (sp * np.cos(yaw)) - obj[:, 0]
    dy = pose[:, 1] + tip * (sp * np.sin(yaw)) - obj[:, 1]
    dz = pose[:, 2] + tip * (-np.cos(pit)) - objz
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def step_batch(pose, obj, steps, actions, params):
    bound = params[P_BOUND:P_BOUND + 4]
    a = np.minimum(np.maximum(actions, -bound), bound)
    pose[:, :3] = np.minimum(np.maximum(pose[:, :3] + a[:, :3], params[P_LO:P_LO + 3]),
                             params[P_HI:P_HI + 3])
    pose[:, 5] = _wrap(pose[:, 5] + a[:, 3])
    steps += 1
    dists = tip_distance(pose, obj, params)
    contact = dists <= params[P_CONTACT]
    shaped = -params[P_DSCALE] * dists - params[P_STEPCOST]
    rewards = np.where(contact, params[P_BONUS],
                       np.where(dists > params[P_FAR], -params[P_FARPEN], shaped))
    reasons = np.zeros(len(steps), dtype=np.int8)
    reasons[steps >= int(params[P_MAXSTEPS])] = 2
    reasons[contact] = 1
    return rewards, dists, reasons


def gae(rewards, values, dones, last_values, gamma, lam):
    T = rewards.shape[0]
    adv = np.empty_like(rewards)
    carry = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        nxt = last_values if t == T - 1 else values[t + 1]
        notdone = 1.0 - dones[t]
        delta = rewards[t] + gamma * notdone * nxt - values[t]
        carry = delta + gamma * lam * notdone * carry
        adv[t] = carry
    return adv
