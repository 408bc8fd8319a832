use cnav_core::tensor::{DenseArray, ParamStore, Tape, TensorError, Var};
use cnav_oracles::{fd_gradient, gradient_rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn flatten(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, v)| v.data().to_vec()).collect()
}

fn unflatten(store: &ParamStore, flat: &[f64]) -> ParamStore {
    let mut out = store.clone();
    let mut offset = 0;
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let dst = out.get_mut(&name).unwrap();
        let n = dst.len();
        dst.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    out
}

/// Compares tape gradients of `build` against central differences for every
/// parameter entry; returns the worst relative error.
fn check<F>(store: &ParamStore, build: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store).unwrap();
    let grads = tape.backward(out, 1.0, store).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|(_, g)| g.data().to_vec()).collect();

    let numeric = fd_gradient(
        |flat| {
            let s = unflatten(store, flat);
            let mut t = Tape::new();
            let o = build(&mut t, &s).unwrap();
            t.value(o).item()
        },
        &flatten(store),
        STEP,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| gradient_rel_err(a, n, FLOOR))
        .fold(0.0, f64::max)
}

fn sum_all<'a>(t: &mut Tape<'a>, v: Var) -> Result<Var, TensorError> {
    let n = t.value(v).len();
    let ones = t.input(DenseArray::matrix(1, n, vec![1.0; n]).unwrap());
    t.matmul(ones, v)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..8 {
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..4);
        let mut store = ParamStore::new();
        store.insert("a", random_array(&mut rng, &[m, k])).unwrap();
        store.insert("b", random_array(&mut rng, &[k, n])).unwrap();
        store.insert("x", random_array(&mut rng, &[k])).unwrap();
        store.insert("y", random_array(&mut rng, &[m])).unwrap();
        store.insert("z", random_array(&mut rng, &[m])).unwrap();
        let label = rng.random_range(0..m + k);
        let target: Vec<f64> = {
            let raw: Vec<f64> = (0..m + k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / s).collect()
        };

        let cases: Vec<(&str, Box<dyn for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var, TensorError>>)> = vec![
            ("matmul-matrix", Box::new(|t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let c = t.matmul(a, b)?;
                let c = t.tanh(c)?;
                let zeros = t.input(DenseArray::zeros(t.value(c).shape()));
                t.squared_diff_sum(c, zeros)
            })),
            ("matvec-add-sub-mul", Box::new(|t, s| {
                let a = t.param(s, "a")?;
                let x = t.param(s, "x")?;
                let y = t.param(s, "y")?;
                let z = t.param(s, "z")?;
                let ax = t.matmul(a, x)?;
                let p = t.add(ax, y)?;
                let q = t.sub(p, z)?;
                let r = t.mul(q, y)?;
                sum_all(t, r)
            })),
            ("sigmoid-scale", Box::new(|t, s| {
                let y = t.param(s, "y")?;
                let g = t.sigmoid(y)?;
                let g = t.scale(g, 1.7)?;
                let z = t.param(s, "z")?;
                t.squared_diff_sum(g, z)
            })),
            ("concat-slice-xent", Box::new(move |t, s| {
                let y = t.param(s, "y")?;
                let x = t.param(s, "x")?;
                let c = t.concat(&[y, x])?;
                let len = t.value(c).len();
                let head = t.slice(c, 0, len.min(3))?;
                let tail = t.slice(c, len - len.min(3), len.min(3))?;
                let mixed = t.mul(head, tail)?;
                let l1 = t.softmax_cross_entropy(c, label)?;
                let l2 = sum_all(t, mixed)?;
                t.add(l1, l2)
            })),
            ("kl", Box::new(move |t, s| {
                let y = t.param(s, "y")?;
                let x = t.param(s, "x")?;
                let c = t.concat(&[y, x])?;
                t.kl_divergence(&target, c)
            })),
            ("pow-sqrt", Box::new(|t, s| {
                let y = t.param(s, "y")?;
                let z = t.param(s, "z")?;
                let d = t.squared_diff_sum(y, z)?;
                t.pow(d, 0.5)
            })),
            ("pow-cube", Box::new(|t, s| {
                let x = t.param(s, "x")?;
                let c = t.pow(x, 3.0)?;
                sum_all(t, c)
            })),
        ];

        for (name, build) in &cases {
            let err = check(&store, build.as_ref());
            assert!(err < TOL, "trial {trial} case {name}: rel err {err:.3e}");
        }
    }
}

#[test]
fn random_three_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let dims = [rng.random_range(2..7), rng.random_range(2..7), rng.random_range(2..7), 6];
        let mut store = ParamStore::new();
        for layer in 0..3 {
            store
                .insert(format!("l{layer}.weight"), random_array(&mut rng, &[dims[layer + 1], dims[layer]]))
                .unwrap();
            store
                .insert(format!("l{layer}.bias"), random_array(&mut rng, &[dims[layer + 1]]))
                .unwrap();
        }
        let input = random_array(&mut rng, &[dims[0]]);
        let label = rng.random_range(0..6);
        let err = check(&store, |t, s| {
            let mut h = t.input(input.clone());
            for layer in 0..3 {
                let w = t.param(s, &format!("l{layer}.weight"))?;
                let b = t.param(s, &format!("l{layer}.bias"))?;
                let wx = t.matmul(w, h)?;
                let pre = t.add(wx, b)?;
                h = if layer < 2 { t.tanh(pre)? } else { pre };
            }
            t.softmax_cross_entropy(h, label)
        });
        assert!(err < TOL, "trial {trial}: rel err {err:.3e}");
    }
}
