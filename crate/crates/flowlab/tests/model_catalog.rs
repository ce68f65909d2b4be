//! Catalog-wide contracts: every model builds from its serialized spec,
//! reports consistent dimensions, and fills the derivative bundle with the
//! documented layout (differentiation index first, symmetric second
//! derivatives). Derivatives are cross-checked by central differences.

use flowlab::model::{delta_eval, eval_derivatives, ModelPair, ModelSpec, CATALOG_NAMES};

fn catalog_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::Ou { lambda: 1.3, sigma: 0.7, d: 3 },
        ModelSpec::Gbm { beta: -0.5, alpha: 0.3 },
        ModelSpec::LangevinTanh { d: 2, sigma: 0.6, tanh_weight: 1.5 },
        ModelSpec::MeanField { n: 4, theta: 0.5, gamma: 0.8, sigma: 1.0 },
    ]
}

fn probe_point(d: usize) -> Vec<f64> {
    (0..d).map(|i| 0.3 + 0.4 * i as f64 - 0.2 * ((i % 3) as f64)).collect()
}

#[test]
fn catalog_names_cover_models_and_the_scheme_wrapper() {
    assert!(CATALOG_NAMES.contains(&"ou"));
    assert!(CATALOG_NAMES.contains(&"gbm"));
    assert!(CATALOG_NAMES.contains(&"langevin-tanh"));
    assert!(CATALOG_NAMES.contains(&"frozen-drift"));
}

#[test]
fn specs_round_trip_through_toml_and_json() {
    for spec in catalog_specs() {
        let toml_text = toml::to_string(&spec).unwrap();
        let from_toml: ModelSpec = toml::from_str(&toml_text).unwrap();
        let json_text = serde_json::to_string(&spec).unwrap();
        let from_json: ModelSpec = serde_json::from_str(&json_text).unwrap();
        assert_eq!(
            serde_json::to_value(&from_toml).unwrap(),
            serde_json::to_value(&from_json).unwrap()
        );
        assert_eq!(from_toml.dim(), spec.dim());
    }
}

#[test]
fn built_models_report_consistent_dimensions_and_metadata() {
    for spec in catalog_specs() {
        let model = spec.build();
        assert_eq!(model.dim(), spec.dim());
        assert!(model.noise_dim() >= 1);
        let meta = model.meta();
        assert!(!meta.name.is_empty());
        // Metadata parameters are finite and the name is kebab-case.
        assert!(meta.params.iter().all(|(_, v)| v.is_finite()));
        assert!(meta.name.chars().all(|c| c.is_ascii_lowercase() || c == '-'));
    }
}

#[test]
fn drift_gradients_match_central_differences() {
    let eps = 1e-5;
    for spec in catalog_specs() {
        let model = spec.build();
        let d = model.dim();
        let x = probe_point(d);
        let bundle = eval_derivatives(model.as_ref(), 0.0, &x).unwrap();
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let bp = eval_derivatives(model.as_ref(), 0.0, &xp).unwrap();
            let bm = eval_derivatives(model.as_ref(), 0.0, &xm).unwrap();
            for j in 0..d {
                let fd = (bp.b[j] - bm.b[j]) / (2.0 * eps);
                assert!(
                    (bundle.grad_b[i * d + j] - fd).abs() < 1e-6,
                    "{spec:?}: grad_b[{i},{j}] = {} vs fd {fd}",
                    bundle.grad_b[i * d + j]
                );
            }
        }
    }
}

#[test]
fn diffusion_gradients_match_central_differences() {
    let eps = 1e-5;
    for spec in catalog_specs() {
        let model = spec.build();
        let (d, r) = (model.dim(), model.noise_dim());
        let x = probe_point(d);
        let bundle = eval_derivatives(model.as_ref(), 0.0, &x).unwrap();
        for l in 0..r {
            let block = &bundle.grad_sigma[l * d * d..(l + 1) * d * d];
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += eps;
                xm[i] -= eps;
                let sp = eval_derivatives(model.as_ref(), 0.0, &xp).unwrap();
                let sm = eval_derivatives(model.as_ref(), 0.0, &xm).unwrap();
                for j in 0..d {
                    let fd = (sp.sigma[j * r + l] - sm.sigma[j * r + l]) / (2.0 * eps);
                    assert!(
                        (block[i * d + j] - fd).abs() < 1e-6,
                        "{spec:?}: grad_sigma_{l}[{i},{j}] vs fd"
                    );
                }
            }
        }
    }
}

#[test]
fn second_derivatives_are_symmetric_and_match_differences() {
    let eps = 1e-4;
    for spec in catalog_specs() {
        let model = spec.build();
        let d = model.dim();
        let x = probe_point(d);
        let bundle = eval_derivatives(model.as_ref(), 0.0, &x).unwrap();
        for i in 0..d {
            for j in 0..d {
                for m in 0..d {
                    let sym = bundle.hess_b.get(i, j, m);
                    assert_eq!(sym, bundle.hess_b.get(j, i, m), "{spec:?} not symmetric");
                }
            }
            // Diagonal second difference d_i d_i b^m.
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let bp = eval_derivatives(model.as_ref(), 0.0, &xp).unwrap();
            let bm = eval_derivatives(model.as_ref(), 0.0, &xm).unwrap();
            for m in 0..d {
                let fd = (bp.b[m] - 2.0 * bundle.b[m] + bm.b[m]) / (eps * eps);
                assert!(
                    (bundle.hess_b.get(i, i, m) - fd).abs() < 1e-4,
                    "{spec:?}: hess_b[{i},{i},{m}] = {} vs fd {fd}",
                    bundle.hess_b.get(i, i, m)
                );
            }
        }
    }
}

#[test]
fn pairs_require_matching_dimensions() {
    let a = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 2 }.build();
    let b = ModelSpec::Gbm { beta: -0.5, alpha: 0.3 }.build();
    assert!(ModelPair::new(a.as_ref(), b.as_ref()).is_err());
    let c = ModelSpec::Ou { lambda: 0.5, sigma: 0.2, d: 2 }.build();
    let pair = ModelPair::new(a.as_ref(), c.as_ref()).unwrap();
    assert_eq!(pair.dim(), 2);

    // delta_eval is base minus perturbed, coordinatewise.
    let delta = delta_eval(&pair, 0.0, &[1.0, -2.0]).unwrap();
    assert_eq!(delta.delta_b, vec![-0.5, 1.0]);
}
