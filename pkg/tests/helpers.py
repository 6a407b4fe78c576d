"""Shared test utilities: finite differences, relative errors and small reference scenes."""
import numpy as np


def central_diff(f, x, h=1e-4, indices=None):
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck_model(seed=0, n=10, size=32, margin=0.05):
    """A small f64 dynamic model with every nonsmooth point kept away from the FD stencil.

    ReLU pre-activations are pushed at least ``margin`` from zero, canonical
    positions avoid HexPlane cell edges, colours stay inside (0, 1) and the
    splat cutoff is wide so no pixel sits on a footprint border.
    """
    from splat4d.camera import CameraIntrinsics, OrbitRig, orbit_poses
    from splat4d.gaussians import GaussianCloud
    from splat4d.model import DynamicModel
    from splat4d.rasterizer import RenderSettings

    rng = np.random.default_rng(seed)
    levels = ((4, 3), (6, 5))
    bmin, bmax = np.full(3, -0.5), np.full(3, 0.5)
    pts = []
    while len(pts) < n:
        p = rng.uniform(-0.3, 0.3, 3)
        ok = True
        for spatial, _ in levels:
            g = (p - bmin) / (bmax - bmin) * (spatial - 1)
            ok &= bool(np.all(np.abs(g - np.round(g)) > 0.02))
        if ok:
            pts.append(p)
    q = rng.normal(size=(n, 4))
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rng.uniform(-0.6, 0.6, (n, 3))
    sh[:, 1:] = rng.normal(scale=0.05, size=(n, 3, 3))
    cloud = GaussianCloud(np.array(pts), q / np.linalg.norm(q, axis=1, keepdims=True),
                          np.log(rng.uniform(0.06, 0.14, (n, 3))),
                          np.log(1 / (1 / rng.uniform(0.3, 0.8, n) - 1)), sh)
    settings = RenderSettings(background=(0.2, 0.5, 0.7), sigma_cutoff=10.0, alpha_min=0.0)
    model = DynamicModel.create(cloud, bmin, bmax, levels=levels, features=4, deform_hidden=8,
                                color_hidden=8, settings=settings, rng=rng)
    model.grid.coord_grad = True
    for ps in model.grid.planes:
        for p in ps:
            p[:] = rng.uniform(0.7, 1.3, p.shape)
    t = 0.37
    feats = model.grid.query(cloud.positions, t)
    for mlp, scale in ((model.decoder.mlp, 0.05), (model.color_head.mlp, 0.03)):
        mlp.weights[-1][:] = rng.normal(scale=scale, size=mlp.weights[-1].shape)
        mlp.biases[-1][:] += rng.normal(scale=scale, size=mlp.biases[-1].shape)
        h = feats
        for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
            pre = h @ w + b
            for j in range(pre.shape[1]):
                col = pre[:, j]
                if np.min(np.abs(col)) < margin:
                    # move the whole unit to one side of the kink
                    b[j] += (margin - col.min()) if rng.random() < 0.7 else (-margin - col.max())
            h = np.maximum(h @ w + b, 0.0)
    intr = CameraIntrinsics.from_fov(size, size)
    pose = orbit_poses(OrbitRig(6, 15.0, 2.0))[1]
    return model, pose, intr, t


def random_cloud(rng, n, dtype=np.float64, spread=0.3, scale=(0.04, 0.12), opacity=(0.3, 0.9)):
    from splat4d.gaussians import GaussianCloud

    q = rng.normal(size=(n, 4))
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)).astype(dtype),
        rotations=(q / np.linalg.norm(q, axis=1, keepdims=True)).astype(dtype),
        log_scales=np.log(rng.uniform(*scale, (n, 3))).astype(dtype),
        opacity_logits=np.log(1 / (1 / rng.uniform(*opacity, n) - 1)).astype(dtype),
        sh_coeffs=np.zeros((n, 1, 3), dtype=dtype),
    )


def brute_force_pixel(cloud, colors, pose, intr, settings, x, y):
    """Scalar per-pixel compositing, independent of the renderer's data layout."""
    from splat4d.gaussians import covariance3d
    from splat4d.rasterizer import COV2D_FLOOR
    from splat4d.rasterizer._kernels import ALPHA_MAX

    entries = []
    for i in range(len(cloud)):
        pc = pose.rotation @ (cloud.positions[i].astype(np.float64) - pose.center)
        if pc[2] <= settings.near_plane:
            continue
        fx, fy = intr.focal_x, intr.focal_y
        mean = np.array([fx * pc[0] / pc[2] + intr.principal_x, fy * pc[1] / pc[2] + intr.principal_y])
        j = np.array([[fx / pc[2], 0, -fx * pc[0] / pc[2] ** 2], [0, fy / pc[2], -fy * pc[1] / pc[2] ** 2]])
        sigma = covariance3d(cloud.rotations[i], cloud.log_scales[i])
        cov = j @ pose.rotation @ sigma @ pose.rotation.T @ j.T + COV2D_FLOOR * np.eye(2)
        entries.append((pc[2], i, mean, np.linalg.inv(cov)))
    entries.sort(key=lambda e: (e[0], e[1]))
    p = np.array([x + 0.5, y + 0.5])
    color = np.zeros(3)
    trans = 1.0
    for _, i, mean, inv in entries:
        d = p - mean
        maha = d @ inv @ d
        if maha > settings.sigma_cutoff ** 2:
            continue
        opac = 1 / (1 + np.exp(-float(cloud.opacity_logits[i])))
        a = min(opac * np.exp(-0.5 * maha), ALPHA_MAX)
        if a < settings.alpha_min:
            continue
        color += colors[i] * a * trans
        trans *= 1 - a
    return color + trans * np.asarray(settings.background), 1 - trans
