use dbfem::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_fn(shape, |i| {
        vals[i % vals.len()] + (i / vals.len()) as f64 * 0.01 - n as f64 * 0.005
    })
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, z) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ch) * h + y as usize) * wd + z as usize]
                                    * w.data()[((f * c + ch) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * o + f) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops(
        n in 1usize..3,
        c in 1usize..4,
        o in 1usize..4,
        h in 1usize..10,
        wd in 1usize..10,
        k in prop::sample::select(vec![1usize, 3, 5, 7]),
        stride in 1usize..3,
        vals in prop::collection::vec(-1.0f64..1.0, 7..20),
    ) {
        let pad = k / 2;
        let x = tensor(&[n, c, h, wd], &vals);
        let w = tensor(&[o, c, k, k], &vals[1..]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let (shape, want) = conv_oracle(&x, &w, stride, pad);
        prop_assert_eq!(g.shape(y), shape.as_slice());
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn max_pool_matches_direct_loops(
        h in 2usize..12,
        wd in 2usize..12,
        vals in prop::collection::vec(-1.0f64..1.0, 5..30),
    ) {
        let x = tensor(&[1, 2, h, wd], &vals);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.max_pool2d(xv, 2, 2).unwrap();
        let (oh, ow) = (h / 2, wd / 2);
        prop_assert_eq!(g.shape(y), &[1, 2, oh, ow][..]);
        for ch in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    let at = |y: usize, z: usize| x.data()[(ch * h + y) * wd + z];
                    let m = at(2 * i, 2 * j).max(at(2 * i + 1, 2 * j)).max(at(2 * i, 2 * j + 1)).max(at(2 * i + 1, 2 * j + 1));
                    prop_assert_eq!(g.value(y).data()[(ch * oh + i) * ow + j], m);
                }
            }
        }
    }
}
