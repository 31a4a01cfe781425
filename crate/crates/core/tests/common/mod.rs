//! Reference implementations shared by the integration tests. Everything here
//! is written independently of the library's kernels, with plain loops.
#![allow(dead_code)]

use lstc_mda::augment::Sample;
use lstc_mda::lstc::LstcParams;
use lstc_mda::Tensor;
use rand::Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Zero-padded strided temporal convolution with a dense `[C_out, C_in, K, 1]` kernel.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: (usize, usize)) -> Tensor {
    let (ci, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let t_out = (t + pad.0 + pad.1 - k) / stride + 1;
    let mut out = Tensor::zeros(vec![co, t_out, v]);
    for o in 0..co {
        for n in 0..t_out {
            for j in 0..v {
                let mut acc = 0.0;
                for c in 0..ci {
                    for kk in 0..k {
                        let src = (n * stride + kk) as isize - pad.0 as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.data()[(o * ci + c) * k + kk] * x.at3(c, src as usize, j);
                        }
                    }
                }
                let i = out.idx3(o, n, j);
                out.data_mut()[i] = acc;
            }
        }
    }
    out
}

/// Expands per-tap weights into a span-long kernel that is zero at every
/// inactive offset (repeated offsets add up).
pub fn dense_kernel(w_long: &Tensor, taps: &[usize], span: usize) -> Tensor {
    let (co, ci) = (w_long.shape()[0], w_long.shape()[1]);
    let mut dense = Tensor::zeros(vec![co, ci, span, 1]);
    for o in 0..co {
        for c in 0..ci {
            for (k, &off) in taps.iter().enumerate() {
                dense.data_mut()[(o * ci + c) * span + off] += w_long.data()[(o * ci + c) * taps.len() + k];
            }
        }
    }
    dense
}

/// Fusion evaluated one `(t, v)` position at a time. Returns output and weight.
pub fn fuse_oracle(fs: &Tensor, fl: &Tensor, p: &LstcParams, eps: f64) -> (Tensor, Tensor) {
    let (c, t, v) = (fs.shape()[0], fs.shape()[1], fs.shape()[2]);
    let d = p.ps_w.shape()[0];
    let mut out = fs.clone();
    let mut weight = Tensor::zeros(vec![1, t, v]);
    for n in 0..t {
        for j in 0..v {
            let project = |w: &Tensor, b: &Tensor, f: &Tensor| -> Vec<f64> {
                (0..d).map(|k| b.data()[k] + (0..c).map(|ch| w.data()[k * c + ch] * f.at3(ch, n, j)).sum::<f64>()).collect()
            };
            let a_s = project(&p.ps_w, &p.ps_b, fs);
            let a_l = project(&p.pl_w, &p.pl_b, fl);
            let m: Vec<f64> = (0..d).map(|k| p.mu.at3(k, n, j)).collect();
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                dot / (na * nb)
            };
            let s = cos(&a_s, &a_l) + cos(&m, &a_l);
            weight.data_mut()[n * v + j] = s;
            for ch in 0..c {
                let i = out.idx3(ch, n, j);
                out.data_mut()[i] = fs.at3(ch, n, j) + s * fl.at3(ch, n, j);
            }
        }
    }
    (out, weight)
}

/// Nearest-centroid classifier on flattened trajectories; returns held-out accuracy.
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample]) -> f64 {
    let k = train[0].y.len();
    let n = train[0].x.numel();
    let mut centroids = vec![vec![0.0; n]; k];
    let mut counts = vec![0usize; k];
    for s in train {
        let c = s.class();
        counts[c] += 1;
        for (a, x) in centroids[c].iter_mut().zip(s.x.data()) {
            *a += x;
        }
    }
    for (c, cnt) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|a| *a /= (*cnt).max(1) as f64);
    }
    let hits = test
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| c.iter().zip(s.x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.class()
        })
        .count();
    hits as f64 / test.len() as f64
}

/// One to three random byte edits: substitution, deletion, insertion or truncation.
pub fn mutate(base: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    let mut b = base.to_vec();
    const JUNK: &[u8] = b"0123456789 -.eE+x\n\r\t#nan";
    for _ in 0..rng.random_range(1..4) {
        let i = rng.random_range(0..b.len());
        match rng.random_range(0..5) {
            0 => b[i] = JUNK[rng.random_range(0..JUNK.len())],
            1 => {
                b.remove(i);
            }
            2 => b.insert(i, JUNK[rng.random_range(0..JUNK.len())]),
            3 => b.truncate(i),
            _ => b[i] = rng.random(),
        }
        if b.is_empty() {
            break;
        }
    }
    b
}
