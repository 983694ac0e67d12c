"""Print 50-digit reference values that the test-suite freezes.

Independent of the package: uses mpmath only.
"""
import mpmath as mp

mp.mp.dps = 50


def softmax(logits, temperature):
    scaled = [mp.mpf(v) / mp.mpf(temperature) for v in logits]
    exps = [mp.e ** v for v in scaled]
    total = mp.fsum(exps)
    return [e / total for e in exps]


def kl(p, q):
    return mp.fsum(mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b)) for a, b in zip(p, q) if a != 0)


def adamw_trace(p0, grads, lr, b1, b2, eps, wd):
    p, m, v = mp.mpf(p0), mp.mpf(0), mp.mpf(0)
    out = []
    for t, g in enumerate(grads, start=1):
        g = mp.mpf(g)
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (mp.sqrt(vhat) + eps)
        out.append(p)
    return out


if __name__ == "__main__":
    print("softmax((3.1,-0.7,1.2), T=2):")
    for v in softmax(["3.1", "-0.7", "1.2"], 2):
        print("  ", mp.nstr(v, 20))
    print("KL((0.3,0.7) || (0.6,0.4)):", mp.nstr(kl(["0.3", "0.7"], ["0.6", "0.4"]), 20))
    print("AdamW p0=1.0 grads=(0.5,-0.2,0.1) lr=0.1 wd=0.01:")
    for v in adamw_trace("1.0", ["0.5", "-0.2", "0.1"], mp.mpf("0.1"), mp.mpf("0.9"),
                         mp.mpf("0.999"), mp.mpf("1e-8"), mp.mpf("0.01")):
        print("  ", mp.nstr(v, 20))
