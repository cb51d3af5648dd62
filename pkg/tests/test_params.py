import numpy as np
import pytest

from dyadsynth.errors import ContractError, FormatError
from dyadsynth.params import (
    AdamState,
    ParameterStore,
    adam_step,
    load_checkpoint,
    noam_lr,
    restore_store,
    save_checkpoint,
)
from dyadsynth.tensor import Tensor, backward, tsum


def test_adam_first_step_is_lr_sized():
    store = ParameterStore(0)
    p = store.add("w", np.array([1.0], dtype=np.float32))
    p.grad = np.array([1.0], dtype=np.float32)
    adam_step(store, AdamState(), lr=0.1)
    # bias-corrected first step is lr * g / (|g| + eps) ~= lr
    assert abs(p.data[0] - 0.9) < 1e-5


def test_adam_zero_grad_no_move():
    store = ParameterStore(0)
    p = store.add("w", np.array([2.0], dtype=np.float32))
    p.grad = np.zeros(1, dtype=np.float32)
    adam_step(store, AdamState(), lr=0.5)
    assert p.data[0] == 2.0


def test_adam_missing_grad_names_parameter():
    store = ParameterStore(0)
    store.add("alpha", np.zeros(2, dtype=np.float32))
    with pytest.raises(ContractError) as exc:
        adam_step(store, AdamState(), lr=0.1)
    assert "alpha" in str(exc.value)


def test_adam_descends_quadratic():
    store = ParameterStore(0)
    w = store.add("w", np.array([0.0], dtype=np.float32))
    state = AdamState()
    values = []
    for _ in range(10):
        loss = tsum((w - Tensor([3.0])) * (w - Tensor([3.0])))
        values.append(loss.item())
        backward(loss)
        adam_step(store, state, lr=0.3)
        store.zero_grads()
    assert all(b < a for a, b in zip(values, values[1:]))
    assert state.step == 10


def test_noam_schedule():
    warmup, dim = 4000, 512
    at_boundary = noam_lr(warmup, 2.0, warmup, dim)
    assert np.isclose(at_boundary, 2.0 * dim ** -0.5 * warmup ** -0.5)
    assert np.isclose(at_boundary, 2.0 * dim ** -0.5 * warmup * warmup ** -1.5)
    assert np.isclose(noam_lr(warmup // 2, 2.0, warmup, dim), at_boundary / 2)
    assert np.isclose(noam_lr(4000, 2.0, 4000, 512), 1.3975424859373686e-3, rtol=1e-6)
    with pytest.raises(ContractError):
        noam_lr(0, 2.0, warmup, dim)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    store = ParameterStore(42)
    a = store.add("layer.w", rng.standard_normal((4, 5)).astype(np.float32))
    b = store.add("layer.b", rng.standard_normal(5).astype(np.float32))
    path = tmp_path / "model.ckpt"
    save_checkpoint(store, path, step=17, meta={"note": "x"})

    store2 = ParameterStore(0)
    store2.add("layer.w", np.zeros((4, 5), dtype=np.float32))
    store2.add("layer.b", np.zeros(5, dtype=np.float32))
    step, meta = restore_store(store2, path)
    assert step == 17 and meta == {"note": "x"}
    assert store2.rng_seed == 42
    assert np.array_equal(store2["layer.w"].data, a.data)
    assert np.array_equal(store2["layer.b"].data, b.data)

    values, seed, step2, _ = load_checkpoint(path)
    assert seed == 42 and step2 == 17
    assert values["layer.w"].tobytes() == a.data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_duplicate_parameter_name():
    store = ParameterStore(0)
    store.add("w", np.zeros(1, dtype=np.float32))
    with pytest.raises(ContractError):
        store.add("w", np.zeros(1, dtype=np.float32))


def test_training_determinism_bit_identical(rng):
    def run():
        store = ParameterStore(7)
        w = store.add("w", np.linspace(-1, 1, 6, dtype=np.float32))
        state = AdamState()
        for step in range(5):
            loss = tsum((w * w) * Tensor(np.arange(6, dtype=np.float32)))
            backward(loss)
            adam_step(store, state, noam_lr(step + 1, 2.0, 10, 8))
            store.zero_grads()
        return w.data.copy()

    assert np.array_equal(run(), run())
