"""Quick end-to-end check of the `qkd` extension module."""

import math
import random

import qkd


def close(a, b, tol):
    assert abs(a - b) <= tol, (a, b)


def main():
    close(qkd.eve_information(2 * math.sqrt(2)), 0.0, 1e-12)
    close(qkd.eve_information(2.0), 1.0, 1e-12)
    close(qkd.binary_entropy(0.5), 1.0, 1e-12)
    try:
        qkd.eve_information(1.9)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError for |S| <= 2")

    close(abs(qkd.analytic_chsh()), 2 * math.sqrt(2), 1e-12)
    close(abs(qkd.analytic_chsh(intercept_fraction=1.0)), math.sqrt(2), 1e-12)

    est = qkd.secret_fraction(10_000, 3_000, 2.5)
    assert est.final_length == math.floor(10_000 * (1 - est.i_eve)) - 3_000, est

    rng = random.Random(7)
    alice = [rng.getrandbits(1) for _ in range(10_000)]
    bob = [b ^ (rng.random() < 0.02) for b in alice]
    rec = qkd.reconcile(alice, bob, 0.02, shuffle_seed=11)
    assert rec.verified and list(rec.corrected_bits) == alice

    assert qkd.toeplitz_hash([1, 0, 1], [1, 1, 0, 1], 2) == qkd.toeplitz_hash([1, 0, 1], [1, 1, 0, 1], 2)

    try:
        qkd.Config("pair_rate = -5")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError for a negative rate")

    cfg = qkd.Config("duration = 12\nblock_min_key_bits = 10000")
    a, b = cfg.simulate()
    delay, _ = qkd.find_delay(a, b)
    assert len(qkd.match_coincidences(a, b, delay)) > 0

    result = cfg.run(seed=3)
    assert result.exit_code == 0, result.message
    assert result.blocks and result.alice_key == result.bob_key
    for blk in result.blocks:
        assert 2.0 < blk.s_value < 2 * math.sqrt(2)
    bits = sum(blk.final_bits for blk in result.blocks)
    print(f"ok: {len(result.blocks)} block(s), {bits} final key bits")


if __name__ == "__main__":
    main()
