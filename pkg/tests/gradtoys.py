"""Finite-difference checks on tiny random problems, shared by unit and acceptance tests."""

from synrec import ganrs
from synrec import models as M
from synrec.data import RatingDataset
from synrec.numkernel import dropout_mask, grad_check, kink_pattern, loss_eval, make_rng


def toy_ratings(seed, users=6, items=6, count=20, scale=(1, 5)):
    rng = make_rng(seed, "toy")
    cells = rng.choice(users * items, size=count, replace=False)
    ratings = rng.integers(scale[0], scale[1] + 1, size=count)
    return RatingDataset(cells // items, cells % items, ratings, users, items, scale, "toy")


def model_grad_error(kind, seed, K=4, report=None):
    """Worst relative gradient error of one model kind on a 20-rating toy.

    Embeddings and biases are redrawn at a larger scale than the training
    init so the check sees non-trivial activations; dense weights keep their
    initial scale. Dropout masks and variational noise are frozen.
    """
    ds = toy_ratings(seed)
    rng = make_rng(seed, "gradcheck", kind)
    model = M.build(kind, ds.num_users, ds.num_items, M.NetConfig(latent_dim=K), rng, scale=ds.scale)
    for name, value in model.params.items():
        if name in ("P", "Q"):
            model.params[name] = rng.normal(0.0, 0.5, size=value.shape)
        elif name.endswith(".b") and not name.endswith("var.b"):
            model.params[name] = rng.normal(0.0, 0.1, size=value.shape)
    masks = noise = None
    if kind in M.MLP_KINDS:
        widths = model.config.hidden
        masks = [dropout_mask((len(ds), w), r, rng) for w, r in zip(widths, model.config.dropout)]
    if kind == "vdeepmf":
        model.params["user_var.b"] = rng.normal(0.0, 0.5, size=K)
        model.params["item_var.b"] = rng.normal(0.0, 0.5, size=K)
        noise = (rng.normal(size=(len(ds), K)), rng.normal(size=(len(ds), K)))

    def loss_fn(params):
        out, cache = M.forward(model, ds.users, ds.items, training=True, masks=masks, noise=noise)
        value, grad = loss_eval(M.loss_kind(kind), out, M.targets_for(model, ds.ratings))
        n = len(ds)
        return value / n, M.backward(model, cache, grad / n), kink_pattern(cache.get("layers", []))

    def value_fn(params):
        out, cache = M.forward(model, ds.users, ds.items, training=True, masks=masks, noise=noise)
        value, _ = loss_eval(M.loss_kind(kind), out, M.targets_for(model, ds.ratings))
        return value / len(ds), kink_pattern(cache.get("layers", []))

    return grad_check(loss_fn, model.params, report=report, value_fn=value_fn)


def gan_grad_errors(seed, K=4, batch=8, reports=None):
    """Worst relative gradient errors of the discriminator and generator losses."""
    rng = make_rng(seed, "gan-gradcheck")
    cfg = ganrs.GanConfig(latent_dim=K)
    bundle = ganrs.init_bundle(cfg, rng)
    real = rng.normal(size=(batch, cfg.sample_width))
    real[:, -1] = rng.random(batch)
    fake, _ = ganrs.generator_forward(bundle, ganrs.draw_noise(bundle, batch, rng))
    z = ganrs.draw_noise(bundle, batch, rng)

    reports = reports if reports is not None else ({}, {})

    def d_loss(params):
        loss, grads, _, _ = ganrs.discriminator_step_grads(bundle, real, fake)
        _, c_real = ganrs.discriminator_forward(bundle, real)
        _, c_fake = ganrs.discriminator_forward(bundle, fake)
        return loss, grads, kink_pattern(c_real + c_fake)

    def g_loss(params):
        loss, grads = ganrs.generator_step_grads(bundle, z)
        out, (g_caches, _) = ganrs.generator_forward(bundle, z)
        _, d_caches = ganrs.discriminator_forward(bundle, out)
        return loss, grads, kink_pattern(g_caches + d_caches)

    def d_value(params):
        p_real, c_real = ganrs.discriminator_forward(bundle, real)
        p_fake, c_fake = ganrs.discriminator_forward(bundle, fake)
        return ganrs.discriminator_loss(p_real.ravel(), p_fake.ravel()), kink_pattern(c_real + c_fake)

    def g_value(params):
        out, (g_caches, _) = ganrs.generator_forward(bundle, z)
        p_fake, d_caches = ganrs.discriminator_forward(bundle, out)
        return ganrs.generator_loss(p_fake.ravel(), cfg.generator_loss), kink_pattern(g_caches + d_caches)

    return (grad_check(d_loss, bundle.discriminator, report=reports[0], value_fn=d_value),
            grad_check(g_loss, bundle.generator, report=reports[1], value_fn=g_value))
