mod common;

use nalgebra::DMatrix;

use nmtkit::autodiff::ParamKind;
use nmtkit::init::{init_weight, InitMethod, RngState};
use nmtkit::layers::InitSpec;
use nmtkit::model::{Model, ModelType};

use common::options;

fn singular_values(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let w = init_weight::<f64>(InitMethod::Orthogonal, &[rows, cols], &mut RngState::from_seed(seed)).unwrap();
    DMatrix::from_row_slice(rows, cols, w.data()).singular_values().iter().copied().collect()
}

#[test]
fn orthogonal_singular_values_are_one() {
    for (i, (r, c)) in [(1, 1), (4, 4), (32, 32), (7, 3), (3, 7), (50, 20)].into_iter().enumerate() {
        let sv = singular_values(r, c, i as u64);
        assert_eq!(sv.len(), r.min(c));
        for s in sv {
            approx::assert_abs_diff_eq!(s, 1.0, epsilon = 1e-8);
        }
    }
}

#[test]
fn same_seed_same_tensor() {
    for method in [InitMethod::Xavier, InitMethod::He, InitMethod::Orthogonal, InitMethod::Normal] {
        let a = init_weight::<f64>(method, &[6, 5], &mut RngState::from_seed(9)).unwrap();
        let b = init_weight::<f64>(method, &[6, 5], &mut RngState::from_seed(9)).unwrap();
        let c = init_weight::<f64>(method, &[6, 5], &mut RngState::from_seed(10)).unwrap();
        assert_eq!(a.data(), b.data(), "{method}");
        assert_ne!(a.data(), c.data(), "{method}");
    }
}

#[test]
fn biases_start_at_zero_for_every_scheme() {
    for weight in [InitMethod::Xavier, InitMethod::He, InitMethod::Orthogonal, InitMethod::Normal] {
        for kind in [ModelType::Attention, ModelType::Rnnlm] {
            let mut o = options(9, 9, 4, 6);
            o.layer_norm = true;
            o.n_enc_layers = 1;
            o.init = InitSpec { weight, recurrent: InitMethod::Orthogonal };
            let m = Model::<f64>::init(kind, o, &mut RngState::from_seed(3)).unwrap();
            let mut biases = 0;
            for (_, p) in m.store().iter() {
                match p.kind {
                    ParamKind::Bias => {
                        biases += 1;
                        assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
                    }
                    ParamKind::Gain => assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name),
                    _ => {}
                }
            }
            assert!(biases > 0);
        }
    }
}

#[test]
fn recurrent_matrices_are_orthogonal() {
    let m = Model::<f64>::init(ModelType::Attention, options(9, 9, 4, 6), &mut RngState::from_seed(4)).unwrap();
    let mut checked = 0;
    for (_, p) in m.store().iter() {
        let s = p.value.shape();
        if [".U", ".U_r", ".U_z"].iter().any(|n| p.name.ends_with(n)) {
            assert_eq!(s[0], s[1], "{}", p.name);
            for sv in DMatrix::from_row_slice(s[0], s[1], p.value.data()).singular_values().iter() {
                approx::assert_abs_diff_eq!(*sv, 1.0, epsilon = 1e-8);
            }
            checked += 1;
        }
    }
    assert!(checked > 0, "no recurrent matrices found");
}
