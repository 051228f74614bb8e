//! Gradient-integrity suite: per-op finite-difference checks plus the full
//! training objective differentiated end to end through a small model.
//! Shared by the `gradcheck` CLI command and the acceptance tests.

use crate::autodiff::{grad_check, AutodiffError, Shape, SourceRows, Tape, Tensor};
use crate::model::Deformer;
use crate::losses::{l_total, LossConfig, TripletBatch};
use crate::model::{Model, ModelConfig, ModelDeformer, PairSegment};
use crate::pointcloud::{AugmentationTransform, KdTree, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PER_OP_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    fn push(&mut self, name: &'static str, max_rel_err: f64, tol: f64) {
        self.entries.push(SuiteEntry {
            name,
            max_rel_err,
            tol,
            passed: max_rel_err < tol,
        });
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                )
            })
            .collect(),
    )
    .expect("non-empty")
}

/// Runs every per-op check at `PER_OP_TOL` and the composite checks at
/// `COMPOSITE_TOL`, double precision, central differences with `FD_STEP`.
pub fn run_gradcheck_suite(seed: u64, triplet_points: usize, toy_width: usize) -> Result<SuiteReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();

    // linear
    let params = [
        rand_tensor(&mut rng, Shape::Matrix(4, 5), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Matrix(3, 5), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
        tape.sum_sq_norm(y)
    })?;
    report.push("linear", r.max_rel_err, PER_OP_TOL);

    // hadamard_affine
    let params = [
        rand_tensor(&mut rng, Shape::Matrix(5, 4), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(4), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(4), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.hadamard_affine(ids[0], ids[1], ids[2])?;
        tape.sum_sq_norm(y)
    })?;
    report.push("hadamard_affine", r.max_rel_err, PER_OP_TOL);

    // segmented_affine
    let params = [
        rand_tensor(&mut rng, Shape::Matrix(6, 3), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.segmented_affine(ids[0], vec![(0, 2, ids[1], ids[2]), (2, 4, ids[3], ids[4])])?;
        tape.sum_sq_norm(y)
    })?;
    report.push("segmented_affine", r.max_rel_err, PER_OP_TOL);

    // relu, away from the kink
    let relu_in: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let params = [Tensor::from_vec(Shape::Matrix(3, 4), relu_in).unwrap()];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.relu(ids[0])?;
        tape.sum_sq_norm(y)
    })?;
    report.push("relu", r.max_rel_err, PER_OP_TOL);

    // tanh
    let params = [rand_tensor(&mut rng, Shape::Matrix(3, 4), -2.0, 2.0)];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.tanh_act(ids[0])?;
        tape.sum_sq_norm(y)
    })?;
    report.push("tanh", r.max_rel_err, PER_OP_TOL);

    // max_pool_points
    let params = [rand_tensor(&mut rng, Shape::Matrix(6, 4), -1.0, 1.0)];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.max_pool_points(ids[0])?;
        tape.sum_sq_norm(y)
    })?;
    report.push("max_pool_points", r.max_rel_err, PER_OP_TOL);

    // linear_max_pool (fused encoder tail)
    let params = [
        rand_tensor(&mut rng, Shape::Matrix(7, 4), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Matrix(5, 4), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(5), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let y = tape.linear_max_pool(ids[0], ids[1], Some(ids[2]))?;
        tape.sum_sq_norm(y)
    })?;
    report.push("linear_max_pool", r.max_rel_err, PER_OP_TOL);

    // concat + slice + scale + mean + add
    let params = [
        rand_tensor(&mut rng, Shape::Vector(4), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Vector(3), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let cat = tape.concat(ids[0], ids[1])?;
        let sl = tape.slice(cat, 2, 4)?;
        let sc = tape.scale(sl, -1.5)?;
        let m = tape.mean(sc)?;
        let ssq = tape.sum_sq_norm(cat)?;
        tape.add(m, ssq)
    })?;
    report.push("concat/slice/scale/mean", r.max_rel_err, PER_OP_TOL);

    // sub + sum_sq_norm
    let params = [
        rand_tensor(&mut rng, Shape::Matrix(4, 3), -1.0, 1.0),
        rand_tensor(&mut rng, Shape::Matrix(4, 3), -1.0, 1.0),
    ];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let d = tape.sub(ids[0], ids[1])?;
        tape.sum_sq_norm(d)
    })?;
    report.push("sub/sum_sq_norm", r.max_rel_err, PER_OP_TOL);

    // euclid_norm_rows, rows bounded away from zero
    let norm_in: Vec<f64> = (0..24)
        .map(|_| rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let params = [Tensor::from_vec(Shape::Matrix(8, 3), norm_in).unwrap()];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let n = tape.euclid_norm_rows(ids[0])?;
        tape.mean(n)
    })?;
    report.push("euclid_norm_rows", r.max_rel_err, PER_OP_TOL);

    // slice_rows
    let params = [rand_tensor(&mut rng, Shape::Matrix(5, 3), -1.0, 1.0)];
    let r = grad_check(&params, FD_STEP, PER_OP_TOL, |tape, ids| {
        let s = tape.slice_rows(ids[0], 1, 3)?;
        tape.sum_sq_norm(s)
    })?;
    report.push("slice_rows", r.max_rel_err, PER_OP_TOL);

    // chamfer_asym op
    let target: Vec<[f64; 3]> = (0..9)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let params = [rand_tensor(&mut rng, Shape::Matrix(12, 3), -1.0, 1.0)];
    let r = grad_check(&params, 1e-5, PER_OP_TOL, |tape, ids| {
        tape.chamfer_asym(ids[0], SourceRows::All, &target)
    })?;
    report.push("chamfer_asym", r.max_rel_err, PER_OP_TOL);

    // gather_rows: must contribute exactly zero gradient.
    let gather_zero = {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(rand_tensor(&mut rng, Shape::Matrix(4, 3), -1.0, 1.0))?;
        let g = tape.gather_rows(x, &[1, 3, 0])?;
        let s = tape.sum_sq_norm(g)?;
        let grads = tape.backward(s)?;
        if grads.get(x).is_none() {
            0.0
        } else {
            1.0
        }
    };
    report.push("gather_rows (blocked gradient)", gather_zero, PER_OP_TOL);

    // Composite: encoder through map-style chamfer, then the full objective.
    // Separate stream so the composite instance does not depend on how many
    // draws the per-op checks consumed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC10D);
    let model: Model<f64> = Model::init(ModelConfig::toy(toy_width), seed ^ 0x5eed);
    let a = random_cloud(&mut rng, triplet_points).normalize_bbox().unwrap();
    let b = random_cloud(&mut rng, triplet_points).normalize_bbox().unwrap();
    let c = random_cloud(&mut rng, triplet_points).normalize_bbox().unwrap();

    // chamfer(map(A,B), B): end-to-end differentiability of the pipeline.
    let flat_params: Vec<Tensor<f64>> = model.params().iter().map(|t| (*t).clone()).collect();
    let config = model.config.clone();
    let (cloud_a, cloud_b) = (a.clone(), b.clone());
    let r = grad_check(&flat_params, FD_STEP, COMPOSITE_TOL, |tape, ids| {
        let mut deformer =
            ModelDeformer::from_param_nodes(tape, &config, ids, &[&cloud_a, &cloud_b])?;
        let input = tape.constant(Tensor::from_points(&cloud_a.to_arrays()))?;
        let out = deformer.deform(
            tape,
            input,
            &[PairSegment {
                source_slot: 0,
                target_slot: 1,
                start: 0,
                len: cloud_a.len(),
            }],
        )?;
        tape.chamfer_asym(out, SourceRows::All, &cloud_b.to_arrays())
    })?;
    report.push("map->chamfer end-to-end", r.max_rel_err, COMPOSITE_TOL);

    // Full L_total on a random triplet through the toy model.
    let trees = [KdTree::build(&a), KdTree::build(&b), KdTree::build(&c)];
    let mut psi_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7);
    let psis = [
        AugmentationTransform::sample_self_reconstruction(&mut psi_rng),
        AugmentationTransform::sample_self_reconstruction(&mut psi_rng),
        AugmentationTransform::sample_self_reconstruction(&mut psi_rng),
    ];
    let sr_clouds = [
        psis[0].apply(&a).unwrap(),
        psis[1].apply(&b).unwrap(),
        psis[2].apply(&c).unwrap(),
    ];
    let (ca, cb, cc) = (a.clone(), b.clone(), c.clone());
    let r = grad_check(&flat_params, FD_STEP, COMPOSITE_TOL, |tape, ids| {
        let slots: Vec<&PointCloud> = vec![&ca, &cb, &cc, &sr_clouds[0], &sr_clouds[1], &sr_clouds[2]];
        let mut deformer = ModelDeformer::from_param_nodes(tape, &config, ids, &slots)?;
        let batch = TripletBatch::new([&ca, &cb, &cc], [&trees[0], &trees[1], &trees[2]], None)
            .map_err(|_| AutodiffError::NonFiniteValue { context: "triplet" })?;
        let out = l_total(
            tape,
            &mut deformer,
            &batch,
            Some(&sr_clouds),
            &LossConfig::default(),
            0,
        )
        .map_err(|_| AutodiffError::NonFiniteValue { context: "l_total" })?;
        Ok(out.total)
    })?;
    report.push("L_total end-to-end", r.max_rel_err, COMPOSITE_TOL);

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_spec_tolerances() {
        let report = run_gradcheck_suite(7, 24, 8).unwrap();
        for entry in &report.entries {
            assert!(
                entry.passed,
                "{} failed: {} >= {}",
                entry.name, entry.max_rel_err, entry.tol
            );
        }
    }
}
