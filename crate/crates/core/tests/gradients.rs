use rand::Rng;
use relapse_core::nn::{
    finite_diff_grad_check, network_backward, GradCheckReport, LossKind, Mode, NetworkParams,
    NetworkShape,
};
use relapse_core::seed;

const DAYS: usize = 5;
const DIM: usize = 12;
const BATCH: usize = 4;
const STEP: f64 = 1e-5;
const INSTANCES: usize = 20;
/// Resolution of a central difference with `STEP` near a collapsed unit.
const DIFFERENCE_FLOOR: f64 = 5e-10;

fn reduced_shape() -> NetworkShape {
    NetworkShape {
        input_dim: DIM,
        hidden_dim: 8,
        fc1: 8,
        fc2: 4,
        dropout_rate: 0.2,
    }
}

struct Instance {
    params: NetworkParams,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    dropout_seed: u64,
}

impl Instance {
    fn new(s: u64) -> Self {
        let mut rng = seed::rng(s ^ 0xABCD);
        Instance {
            params: NetworkParams::init(&reduced_shape(), s).unwrap(),
            xs: (0..BATCH)
                .map(|_| (0..DAYS * DIM).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect(),
            ys: vec![1.0, 0.0, 1.0, 0.0],
            dropout_seed: s + 100,
        }
    }

    fn batch(&self) -> Vec<&[f64]> {
        self.xs.iter().map(|v| v.as_slice()).collect()
    }

    /// A relu unit feeding batch norm that fires for exactly one sample, or
    /// for all of them, has a gradient of at most order epsilon.
    fn has_collapsed_unit(&self) -> bool {
        let a1 = self
            .params
            .fc1_activations(&self.batch(), Mode::Train, self.dropout_seed)
            .unwrap();
        (0..a1.cols()).any(|j| {
            let active = (0..a1.rows()).filter(|&r| a1.get(r, j) > 0.0).count();
            active == 1 || active == a1.rows()
        })
    }

    fn check(&self, loss: LossKind) -> GradCheckReport {
        let refs = self.batch();
        let out = network_backward(
            &self.params,
            &refs,
            &self.ys,
            loss,
            Mode::Train,
            self.dropout_seed,
        )
        .unwrap();
        finite_diff_grad_check(&self.params, &out.grads, STEP, |p: &NetworkParams| {
            p.loss(&refs, &self.ys, loss, Mode::Train, self.dropout_seed)
        })
        .unwrap()
    }
}

fn instances() -> (Vec<Instance>, Vec<Instance>) {
    let mut regular = Vec::new();
    let mut collapsed = Vec::new();
    let mut s = 0;
    while regular.len() < INSTANCES {
        let inst = Instance::new(s);
        if inst.has_collapsed_unit() {
            collapsed.push(inst);
        } else {
            regular.push(inst);
        }
        s += 1;
    }
    (regular, collapsed)
}

fn relative_check(loss: LossKind) {
    let (regular, collapsed) = instances();
    for inst in &regular {
        let report = inst.check(loss);
        assert!(report.checked > 1000);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
    for inst in &collapsed {
        let report = inst.check(loss);
        for &(a, n) in &report.pairs {
            let bound = 1e-4 * (a.abs() + n.abs()) + DIFFERENCE_FLOOR;
            assert!((a - n).abs() <= bound, "analytic {a} numeric {n}");
        }
    }
}

#[test]
fn bce_gradients_match_finite_differences() {
    relative_check(LossKind::Bce);
}

#[test]
fn soft_f2_gradients_match_finite_differences() {
    relative_check(LossKind::SoftF2);
}

#[test]
fn eval_mode_gradients_match_finite_differences() {
    let mut inst = Instance::new(7);
    let refs = inst.batch();
    let out =
        network_backward(&inst.params, &refs, &inst.ys, LossKind::Bce, Mode::Train, 1).unwrap();
    inst.params.apply_batch_stats(&out);
    let refs = inst.batch();
    let out =
        network_backward(&inst.params, &refs, &inst.ys, LossKind::Bce, Mode::Eval, 0).unwrap();
    let report = finite_diff_grad_check(&inst.params, &out.grads, STEP, |p: &NetworkParams| {
        p.loss(&refs, &inst.ys, LossKind::Bce, Mode::Eval, 0)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn step_outside_range_is_rejected() {
    let inst = Instance::new(0);
    let refs = inst.batch();
    let out =
        network_backward(&inst.params, &refs, &inst.ys, LossKind::Bce, Mode::Train, 1).unwrap();
    for step in [1e-9, 1e-2] {
        assert!(
            finite_diff_grad_check(&inst.params, &out.grads, step, |p: &NetworkParams| {
                p.loss(&refs, &inst.ys, LossKind::Bce, Mode::Train, 1)
            })
            .is_err()
        );
    }
}
