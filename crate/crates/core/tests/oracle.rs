//! A straight-line VQ attention written with plain loops over nested
//! vectors, checked against both library implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vqattn::attention::{vq_attn_quadratic, GauParams, HeadConfig, HeadKind};
use vqattn::linear::{vq_attn_linear, Reduction};
use vqattn::quantizer::Codebook;
use vqattn::tensor::RMS_EPS;
use vqattn::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn rms(row: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    row.iter().map(|v| v / (ms + RMS_EPS).sqrt()).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn oracle(x: &Tensor, p: &GauParams, books: &[Codebook], head: HeadConfig) -> Mat {
    let xm = to_mat(x);
    let t = xm.len();
    let gain = p.norm_gain.data();
    let xt: Mat = xm
        .iter()
        .map(|r| rms(r).iter().zip(gain).map(|(v, g)| v * g).collect())
        .collect();
    let scale = 1.0 / p.tau.sqrt();
    let dk = p.d_k;
    let qall = matmul(&xt, &to_mat(&p.w_q));
    let kall = matmul(&xt, &to_mat(&p.w_k));
    let vall: Mat = matmul(&xt, &to_mat(&p.w_v))
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    let g: Mat = matmul(&xt, &to_mat(&p.w_g))
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    let dvh = vall[0].len() / head.kv_heads();
    let bias = p.bias_spec();

    let mut wv = vec![Vec::new(); t];
    for h in 0..head.query_heads() {
        let kv = head.kv_of(h);
        let cb = books[kv].codewords();
        let q: Mat = cols(&qall, h * dk, dk)
            .iter()
            .map(|r| rms(r).iter().map(|v| v * scale).collect())
            .collect();
        let k: Mat = cols(&kall, kv * dk, dk)
            .iter()
            .map(|r| rms(r).iter().map(|v| v * scale).collect())
            .collect();
        let khat: Mat = k
            .iter()
            .map(|r| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for s in 0..cb.rows() {
                    let d: f64 = r.iter().zip(cb.row(s)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                cb.row(best).to_vec()
            })
            .collect();
        let v = cols(&vall, kv * dvh, dvh);
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&khat[j]).map(|(a, b)| a * b).sum::<f64>() + bias.offset_bias(i - j))
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; dvh];
            for (j, w) in e.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(&v[j]) {
                    *o += w / z * vv;
                }
            }
            wv[i].extend(out);
        }
    }
    let gated: Mat = wv
        .iter()
        .zip(&g)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    let o = matmul(&gated, &to_mat(&p.w_o));
    xm.iter()
        .zip(&o)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn max_dev(a: &Tensor, b: &Mat) -> f64 {
    let mut d: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            d = d.max((a.at(i, j) - v).abs());
        }
    }
    d
}

#[test]
fn library_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..60 {
        let kind = [HeadKind::Shga, HeadKind::Mqa, HeadKind::Mha][case % 3];
        let head = HeadConfig::new(kind, rng.random_range(2..=3)).unwrap();
        let l = [2, 4, 8][rng.random_range(0..3)];
        let t = l * rng.random_range(1..=8);
        let dm = rng.random_range(2..=7);
        let dk = rng.random_range(1..=5);
        let dv = head.heads * rng.random_range(1..=3);
        let s = rng.random_range(1..=12);
        let mut p = GauParams::init(dm, dk, dv, l, head, &mut rng).unwrap();
        let proj: Vec<f64> = (0..dk).map(|_| StandardNormal.sample(&mut rng)).collect();
        p.bias_proj = Tensor::new(&[dk], proj).unwrap();
        let books: Vec<Codebook> = (0..head.kv_heads())
            .map(|_| Codebook::random(s, dk, 0.4, 0.99, &mut rng).unwrap())
            .collect();
        let xs: Vec<f64> = (0..t * dm).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(&[t, dm], xs).unwrap();

        let want = oracle(&x, &p, &books, head);
        let quad = vq_attn_quadratic(&x, &p, &books, head).unwrap();
        assert!(max_dev(&quad.y, &want) < 1e-10, "case {case}: quadratic off by {}", max_dev(&quad.y, &want));
        for r in Reduction::ALL {
            let lin = vq_attn_linear(&x, &p, &books, head, r).unwrap();
            assert!(max_dev(&lin.y, &want) < 1e-10, "case {case} {r}: linear off by {}", max_dev(&lin.y, &want));
        }
    }
}
