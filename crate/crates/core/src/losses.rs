//! Training objectives: asymmetric Chamfer reconstruction over all ordered
//! pairs of a shape triplet, 2- and 3-cycle consistency with hard
//! nearest-neighbor projection, self-reconstruction against a known synthetic
//! transform, and the per-part supervised Chamfer variant.
//!
//! The projection step is a hard nearest-neighbor selection with blocked
//! gradient: its output is a constant selection from the target cloud, so a
//! cycle term trains the outer mapping through its direct arguments while the
//! inner mapping receives gradient only through other loss terms.
//!
//! All loss builders are pure functions of (deformer, batch) on a caller
//! provided tape; concurrent evaluation on distinct tapes is safe.

use crate::autodiff::{AutodiffError, NodeId, Real, SourceRows, Tape, Tensor};
use crate::model::{Deformer, PairSegment};
use crate::pointcloud::{AugmentationTransform, GeomError, KdTree, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("triplet clouds must have equal point counts")]
    UnequalCardinality,
    #[error("label space mismatch between triplet clouds")]
    LabelSpaceMismatch,
}

/// A sampled training triplet: three augmented, normalized clouds of equal
/// cardinality with their kd-trees, plus optional per-point labels sharing
/// one label space.
pub struct TripletBatch<'a> {
    pub clouds: [&'a PointCloud; 3],
    pub trees: [&'a KdTree; 3],
    pub labels: Option<[&'a [u32]; 3]>,
}

impl<'a> TripletBatch<'a> {
    pub fn new(
        clouds: [&'a PointCloud; 3],
        trees: [&'a KdTree; 3],
        labels: Option<[&'a [u32]; 3]>,
    ) -> Result<Self, LossError> {
        let n = clouds[0].len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(LossError::UnequalCardinality);
        }
        if let Some(ls) = &labels {
            if ls.iter().zip(clouds.iter()).any(|(l, c)| l.len() != c.len()) {
                return Err(LossError::LabelSpaceMismatch);
            }
        }
        Ok(TripletBatch { clouds, trees, labels })
    }

    fn n(&self) -> usize {
        self.clouds[0].len()
    }
}

/// Loss weighting and scheduling knobs.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Weight on the cycle terms. `f64::INFINITY` means cycle-only training:
    /// the Chamfer and self-reconstruction terms are dropped entirely.
    pub lambda_cy: f64,
    /// Self-reconstruction is active for epochs `< sr_cutoff_epoch`.
    pub sr_cutoff_epoch: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cy: 1.0,
            sr_cutoff_epoch: 30,
        }
    }
}

/// Scalar loss components of one triplet evaluation.
/// `l_total = l_ch + lambda_cy * (l_cy2 + l_cy3) + [sr_active] * l_sr`,
/// except in cycle-only mode (`lambda_cy = inf`) where
/// `l_total = l_cy2 + l_cy3`. Skipped components report 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub l_ch: f64,
    pub l_cy2: f64,
    pub l_cy3: f64,
    pub l_sr: f64,
    pub l_total: f64,
    pub sr_active: bool,
}

/// All ordered pairs of triplet slots, the order the loss sums run in.
const ORDERED_PAIRS: [(usize, usize); 6] = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)];

/// All permutations (X, Y, Z) of the triplet slots.
const PERMUTATIONS: [(usize, usize, usize); 6] = [
    (0, 1, 2),
    (0, 2, 1),
    (1, 0, 2),
    (1, 2, 0),
    (2, 0, 1),
    (2, 1, 0),
];

fn stack_points<T: Real>(clouds: &[&PointCloud]) -> Tensor<T> {
    let mut rows = Vec::with_capacity(clouds.iter().map(|c| c.len()).sum());
    for c in clouds {
        rows.extend(c.to_arrays());
    }
    Tensor::from_points(&rows)
}

/// Projects each row of the node's value onto the target cloud and returns
/// the indices of the nearest target points.
fn project_rows<T: Real>(tape: &Tape<T>, node: NodeId, start: usize, len: usize, tree: &KdTree) -> Vec<u32> {
    let data = tape.value(node).data();
    (start..start + len)
        .map(|r| {
            let q = [
                data[r * 3].to_f64(),
                data[r * 3 + 1].to_f64(),
                data[r * 3 + 2].to_f64(),
            ];
            tree.nearest_coord(q).0 as u32
        })
        .collect()
}

/// Mean distance between index-paired rows of a node range and fixed points:
/// `(1/n) Σ ‖node_row_i − ref_i‖₂`.
fn mean_row_distance_to<T: Real>(
    tape: &mut Tape<T>,
    node: NodeId,
    start: usize,
    len: usize,
    reference: &PointCloud,
) -> Result<NodeId, AutodiffError> {
    let rows = tape.slice_rows(node, start, len)?;
    let refs = tape.constant(Tensor::from_points(&reference.to_arrays()))?;
    let diff = tape.sub(rows, refs)?;
    let norms = tape.euclid_norm_rows(diff)?;
    tape.mean(norms)
}

/// 2-cycle consistency between `X` and `Y` (slots into `clouds`/`trees`):
/// `(1/|X|) Σ_{p∈X} ‖p − f_{Y,X}(π_Y(f_{X,Y}(p)))‖₂`.
pub fn cy2<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    clouds: &[&PointCloud],
    trees: &[&KdTree],
    x: usize,
    y: usize,
) -> Result<NodeId, LossError> {
    let n = clouds[x].len();
    let input = tape.constant(stack_points(&[clouds[x]]))?;
    let fwd = deformer.deform(
        tape,
        input,
        &[PairSegment {
            source_slot: x,
            target_slot: y,
            start: 0,
            len: n,
        }],
    )?;
    let idx = project_rows(tape, fwd, 0, n, trees[y]);
    let y_leaf = tape.constant(stack_points(&[clouds[y]]))?;
    let projected = tape.gather_rows(y_leaf, &idx)?;
    let back = deformer.deform(
        tape,
        projected,
        &[PairSegment {
            source_slot: y,
            target_slot: x,
            start: 0,
            len: n,
        }],
    )?;
    Ok(mean_row_distance_to(tape, back, 0, n, clouds[x])?)
}

/// 3-cycle consistency over slots `(X, Y, Z)`:
/// `(1/|X|) Σ_{p∈X} ‖p − f_{Z,X}(π_Z(f_{Y,Z}(π_Y(f_{X,Y}(p)))))‖₂`.
pub fn cy3<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    clouds: &[&PointCloud],
    trees: &[&KdTree],
    x: usize,
    y: usize,
    z: usize,
) -> Result<NodeId, LossError> {
    let n = clouds[x].len();
    let input = tape.constant(stack_points(&[clouds[x]]))?;
    let hop1 = deformer.deform(
        tape,
        input,
        &[PairSegment {
            source_slot: x,
            target_slot: y,
            start: 0,
            len: n,
        }],
    )?;
    let idx1 = project_rows(tape, hop1, 0, n, trees[y]);
    let y_leaf = tape.constant(stack_points(&[clouds[y]]))?;
    let p1 = tape.gather_rows(y_leaf, &idx1)?;
    let hop2 = deformer.deform(
        tape,
        p1,
        &[PairSegment {
            source_slot: y,
            target_slot: z,
            start: 0,
            len: n,
        }],
    )?;
    let idx2 = project_rows(tape, hop2, 0, n, trees[z]);
    let z_leaf = tape.constant(stack_points(&[clouds[z]]))?;
    let p2 = tape.gather_rows(z_leaf, &idx2)?;
    let hop3 = deformer.deform(
        tape,
        p2,
        &[PairSegment {
            source_slot: z,
            target_slot: x,
            start: 0,
            len: n,
        }],
    )?;
    Ok(mean_row_distance_to(tape, hop3, 0, n, clouds[x])?)
}

/// Full cycle loss: for every permutation (X, Y, Z) of the triplet, one
/// 2-cycle and one 3-cycle term — 6 + 6 = 12 terms. Returned as the two sums
/// (2-cycle total, 3-cycle total).
pub fn l_cy<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    batch: &TripletBatch,
) -> Result<(NodeId, NodeId), LossError> {
    let clouds = &batch.clouds[..];
    let trees = &batch.trees[..];
    let mut cy2_terms = Vec::with_capacity(6);
    for (x, y) in ORDERED_PAIRS {
        cy2_terms.push(cy2(tape, deformer, clouds, trees, x, y)?);
    }
    let mut cy3_terms = Vec::with_capacity(6);
    for (x, y, z) in PERMUTATIONS {
        cy3_terms.push(cy3(tape, deformer, clouds, trees, x, y, z)?);
    }
    Ok((tape.add_n(&cy2_terms)?, tape.add_n(&cy3_terms)?))
}

/// Reconstruction loss: asymmetric Chamfer `Ch(f_{X,Y}(X), Y)` summed over
/// all 6 ordered pairs of the triplet.
pub fn l_ch<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    batch: &TripletBatch,
) -> Result<NodeId, LossError> {
    let mut terms = Vec::with_capacity(6);
    for (x, y) in ORDERED_PAIRS {
        let n = batch.clouds[x].len();
        let input = tape.constant(stack_points(&[batch.clouds[x]]))?;
        let deformed = deformer.deform(
            tape,
            input,
            &[PairSegment {
                source_slot: x,
                target_slot: y,
                start: 0,
                len: n,
            }],
        )?;
        terms.push(tape.chamfer_asym(deformed, SourceRows::All, &batch.clouds[y].to_arrays())?);
    }
    Ok(tape.add_n(&terms)?)
}

/// Self-reconstruction for one cloud: `(1/|X|) Σ ‖f_{X,ψ(X)}(p) − ψ(p)‖₂`
/// with the supervised index-wise correspondence `p ↔ ψ(p)`.
/// `x` is the source slot, `psi_x` the slot holding the transformed cloud.
pub fn sr<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    clouds: &[&PointCloud],
    x: usize,
    psi_x: usize,
) -> Result<NodeId, LossError> {
    let n = clouds[x].len();
    let input = tape.constant(stack_points(&[clouds[x]]))?;
    let deformed = deformer.deform(
        tape,
        input,
        &[PairSegment {
            source_slot: x,
            target_slot: psi_x,
            start: 0,
            len: n,
        }],
    )?;
    Ok(mean_row_distance_to(tape, deformed, 0, n, clouds[psi_x])?)
}

/// Sum of self-reconstruction over the three triplet clouds with
/// independently sampled transforms. Returns the loss node and the
/// transformed clouds (ψ(A), ψ(B), ψ(C)).
pub fn l_sr<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    clouds_with_psi: &[&PointCloud],
) -> Result<NodeId, LossError> {
    // Slot layout: 0..3 are A,B,C; 3..6 their transformed images.
    let mut terms = Vec::with_capacity(3);
    for x in 0..3 {
        terms.push(sr(tape, deformer, clouds_with_psi, x, x + 3)?);
    }
    Ok(tape.add_n(&terms)?)
}

/// Applies the three self-reconstruction transforms to the triplet clouds.
pub fn apply_sr_transforms(
    batch: &TripletBatch,
    psis: &[AugmentationTransform; 3],
) -> Result<Vec<PointCloud>, GeomError> {
    psis.iter()
        .zip(batch.clouds.iter())
        .map(|(psi, cloud)| psi.apply(cloud))
        .collect()
}

/// Everything [`l_total`] leaves on the tape: component nodes (when active)
/// and the total.
pub struct TotalLoss {
    pub total: NodeId,
    pub report: LossReport,
}

/// The full training objective on one triplet, with deformation passes shared
/// across terms: the six forward deformations feed both the Chamfer terms and
/// the first hop of every cycle term, then two further stacked passes cover
/// the cycle second/third hops.
///
/// `lambda_cy = 0` skips the cycle passes entirely; `lambda_cy = inf` drops
/// the Chamfer and self-reconstruction terms (cycle-only training).
pub fn l_total<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    batch: &TripletBatch,
    sr_clouds: Option<&[PointCloud; 3]>,
    cfg: &LossConfig,
    epoch: u32,
) -> Result<TotalLoss, LossError> {
    let n = batch.n();
    let cycle_only = cfg.lambda_cy.is_infinite();
    let sr_active = epoch < cfg.sr_cutoff_epoch && sr_clouds.is_some() && !cycle_only;
    let with_cycles = cfg.lambda_cy != 0.0;

    // Stage A: forward deformations f_{X,Y}(X) for all 6 ordered pairs, plus
    // the three self-reconstruction pairs when active.
    let mut stage_a_inputs: Vec<&PointCloud> = Vec::new();
    let mut stage_a_segs: Vec<PairSegment> = Vec::new();
    for (x, y) in ORDERED_PAIRS {
        stage_a_segs.push(PairSegment {
            source_slot: x,
            target_slot: y,
            start: stage_a_inputs.len() * n,
            len: n,
        });
        stage_a_inputs.push(batch.clouds[x]);
    }
    if sr_active {
        for x in 0..3 {
            stage_a_segs.push(PairSegment {
                source_slot: x,
                target_slot: 3 + x,
                start: stage_a_inputs.len() * n,
                len: n,
            });
            stage_a_inputs.push(batch.clouds[x]);
        }
    }
    let stage_a_in = tape.constant(stack_points(&stage_a_inputs))?;
    let stage_a = deformer.deform(tape, stage_a_in, &stage_a_segs)?;

    // Chamfer terms over the six forward deformations.
    let l_ch_node = if !cycle_only {
        let mut terms = Vec::with_capacity(6);
        for (i, (_, y)) in ORDERED_PAIRS.iter().enumerate() {
            terms.push(tape.chamfer_asym(
                stage_a,
                SourceRows::Range { start: i * n, len: n },
                &batch.clouds[*y].to_arrays(),
            )?);
        }
        Some(tape.add_n(&terms)?)
    } else {
        None
    };

    // Self-reconstruction terms.
    let l_sr_node = if sr_active {
        let sr_clouds = sr_clouds.expect("sr_active implies clouds");
        let mut terms = Vec::with_capacity(3);
        for x in 0..3 {
            terms.push(mean_row_distance_to(
                tape,
                stage_a,
                (6 + x) * n,
                n,
                &sr_clouds[x],
            )?);
        }
        Some(tape.add_n(&terms)?)
    } else {
        None
    };

    // Cycle terms share the stage-A deformations as their first hop.
    let (l_cy2_node, l_cy3_node) = if with_cycles {
        // Projections of each forward deformation onto its target.
        let mut projected: Vec<NodeId> = Vec::with_capacity(6);
        for (i, (_, y)) in ORDERED_PAIRS.iter().enumerate() {
            let idx = project_rows(tape, stage_a, i * n, n, batch.trees[*y]);
            let y_leaf = tape.constant(stack_points(&[batch.clouds[*y]]))?;
            projected.push(tape.gather_rows(y_leaf, &idx)?);
        }
        let pair_index = |x: usize, y: usize| {
            ORDERED_PAIRS
                .iter()
                .position(|&(a, b)| a == x && b == y)
                .expect("ordered pair exists")
        };

        // Stage B: the 2-cycle return hops f_{Y,X}(π_Y(...)) and the 3-cycle
        // middle hops f_{Y,Z}(π_Y(...)), stacked into one pass.
        let mut stage_b_rows: Vec<NodeId> = Vec::new();
        let mut stage_b_segs: Vec<PairSegment> = Vec::new();
        for (x, y) in ORDERED_PAIRS {
            stage_b_segs.push(PairSegment {
                source_slot: y,
                target_slot: x,
                start: stage_b_rows.len() * n,
                len: n,
            });
            stage_b_rows.push(projected[pair_index(x, y)]);
        }
        for (x, y, z) in PERMUTATIONS {
            stage_b_segs.push(PairSegment {
                source_slot: y,
                target_slot: z,
                start: stage_b_rows.len() * n,
                len: n,
            });
            stage_b_rows.push(projected[pair_index(x, y)]);
        }
        let stage_b_in = {
            let mut ids = stage_b_rows.clone();
            concat_rows(tape, &mut ids)?
        };
        let stage_b = deformer.deform(tape, stage_b_in, &stage_b_segs)?;

        let mut cy2_terms = Vec::with_capacity(6);
        for (i, (x, _)) in ORDERED_PAIRS.iter().enumerate() {
            cy2_terms.push(mean_row_distance_to(tape, stage_b, i * n, n, batch.clouds[*x])?);
        }
        let l_cy2_node = tape.add_n(&cy2_terms)?;

        // Stage C: final hops f_{Z,X}(π_Z(...)) of the 3-cycles.
        let mut stage_c_rows: Vec<NodeId> = Vec::new();
        let mut stage_c_segs: Vec<PairSegment> = Vec::new();
        for (i, (x, _, z)) in PERMUTATIONS.iter().enumerate() {
            let row_start = (6 + i) * n;
            let idx = project_rows(tape, stage_b, row_start, n, batch.trees[*z]);
            let z_leaf = tape.constant(stack_points(&[batch.clouds[*z]]))?;
            stage_c_segs.push(PairSegment {
                source_slot: *z,
                target_slot: *x,
                start: stage_c_rows.len() * n,
                len: n,
            });
            stage_c_rows.push(tape.gather_rows(z_leaf, &idx)?);
        }
        let stage_c_in = concat_rows(tape, &mut stage_c_rows)?;
        let stage_c = deformer.deform(tape, stage_c_in, &stage_c_segs)?;

        let mut cy3_terms = Vec::with_capacity(6);
        for (i, (x, _, _)) in PERMUTATIONS.iter().enumerate() {
            cy3_terms.push(mean_row_distance_to(tape, stage_c, i * n, n, batch.clouds[*x])?);
        }
        (Some(l_cy2_node), Some(tape.add_n(&cy3_terms)?))
    } else {
        (None, None)
    };

    // Assemble the weighted total.
    let mut total: Option<NodeId> = None;
    let push = |tape: &mut Tape<T>, node: NodeId, acc: &mut Option<NodeId>| -> Result<(), AutodiffError> {
        *acc = Some(match *acc {
            Some(t) => tape.add(t, node)?,
            None => node,
        });
        Ok(())
    };
    if let Some(ch) = l_ch_node {
        push(tape, ch, &mut total)?;
    }
    if let (Some(c2), Some(c3)) = (l_cy2_node, l_cy3_node) {
        let cy_sum = tape.add(c2, c3)?;
        let weighted = if cycle_only || cfg.lambda_cy == 1.0 {
            cy_sum
        } else {
            tape.scale(cy_sum, T::from_f64(cfg.lambda_cy))?
        };
        push(tape, weighted, &mut total)?;
    }
    if let Some(sr_node) = l_sr_node {
        push(tape, sr_node, &mut total)?;
    }
    let total = total.expect("at least one loss component is active");

    let value = |node: Option<NodeId>, tape: &Tape<T>| node.map(|id| tape.value(id).item().to_f64()).unwrap_or(0.0);
    let report = LossReport {
        l_ch: value(l_ch_node, tape),
        l_cy2: value(l_cy2_node, tape),
        l_cy3: value(l_cy3_node, tape),
        l_sr: value(l_sr_node, tape),
        l_total: tape.value(total).item().to_f64(),
        sr_active,
    };
    Ok(TotalLoss { total, report })
}

/// Stacks matrix nodes row-wise by copying through constant concatenation.
/// The inputs here are always gather outputs (constants), so no gradient path
/// is lost.
fn concat_rows<T: Real>(tape: &mut Tape<T>, rows: &mut Vec<NodeId>) -> Result<NodeId, AutodiffError> {
    debug_assert!(rows.iter().all(|id| !tape.requires_grad(*id)));
    let mut stacked: Vec<[f64; 3]> = Vec::new();
    for id in rows.iter() {
        let t = tape.value(*id);
        for r in t.data().chunks(3) {
            stacked.push([r[0].to_f64(), r[1].to_f64(), r[2].to_f64()]);
        }
    }
    tape.constant(Tensor::from_points(&stacked))
}

/// Supervised per-part reconstruction: as [`l_ch`] but each Chamfer term is
/// restricted per label, weighted by the target's per-label point counts.
/// Target labels absent from the deformed source fall back to matching
/// against the whole deformed source.
pub fn l_ch_perpart<T: Real, D: Deformer<T>>(
    tape: &mut Tape<T>,
    deformer: &mut D,
    batch: &TripletBatch,
) -> Result<NodeId, LossError> {
    let labels = batch.labels.ok_or(LossError::LabelSpaceMismatch)?;
    let n = batch.n();
    let mut terms: Vec<NodeId> = Vec::new();
    for (x, y) in ORDERED_PAIRS {
        let input = tape.constant(stack_points(&[batch.clouds[x]]))?;
        let deformed = deformer.deform(
            tape,
            input,
            &[PairSegment {
                source_slot: x,
                target_slot: y,
                start: 0,
                len: n,
            }],
        )?;
        // Partition target points by label.
        let mut target_parts: std::collections::BTreeMap<u32, Vec<[f64; 3]>> = Default::default();
        for (point, &label) in batch.clouds[y].points().iter().zip(labels[y]) {
            target_parts.entry(label).or_default().push(point.to_array());
        }
        for (label, part_points) in target_parts {
            let source_rows: Vec<u32> = labels[x]
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == label)
                .map(|(i, _)| i as u32)
                .collect();
            let rows = if source_rows.is_empty() {
                SourceRows::All
            } else {
                SourceRows::Explicit(source_rows)
            };
            let weight = part_points.len() as f64 / batch.clouds[y].len() as f64;
            let ch = tape.chamfer_asym(deformed, rows, &part_points)?;
            terms.push(tape.scale(ch, T::from_f64(weight))?);
        }
    }
    Ok(tape.add_n(&terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IdentityDeformer;
    use crate::pointcloud::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cy2_identity_stub_on_same_cloud_is_zero() {
        let x = random_cloud(1, 16);
        let tree = KdTree::build(&x);
        let mut tape = Tape::<f64>::new();
        let node = cy2(
            &mut tape,
            &mut IdentityDeformer,
            &[&x, &x],
            &[&tree, &tree],
            0,
            1,
        )
        .unwrap();
        assert_eq!(tape.value(node).item(), 0.0);
    }

    #[test]
    fn cy2_identity_stub_matches_direct_computation() {
        // With f = identity: cy2(X, Y) = (1/|X|) Σ ‖p − π_Y(p)‖.
        let x = random_cloud(2, 8);
        let y = random_cloud(3, 8);
        let (tx, ty) = (KdTree::build(&x), KdTree::build(&y));
        let mut tape = Tape::<f64>::new();
        let node = cy2(&mut tape, &mut IdentityDeformer, &[&x, &y], &[&tx, &ty], 0, 1).unwrap();

        let mut expect = 0.0;
        for p in x.iter() {
            let (i, _) = ty.nearest(*p);
            expect += p.dist(&ty.point(i));
        }
        expect /= x.len() as f64;
        assert!((tape.value(node).item() - expect).abs() < 1e-12);
        assert!(tape.value(node).item() >= 0.0);
    }

    #[test]
    fn cy3_identity_stub_matches_hand_traced_projections() {
        let a = random_cloud(4, 8);
        let b = random_cloud(5, 8);
        let c = random_cloud(6, 8);
        let (ta, tb, tc) = (KdTree::build(&a), KdTree::build(&b), KdTree::build(&c));
        let mut tape = Tape::<f64>::new();
        let node = cy3(
            &mut tape,
            &mut IdentityDeformer,
            &[&a, &b, &c],
            &[&ta, &tb, &tc],
            0,
            1,
            2,
        )
        .unwrap();

        let mut expect = 0.0;
        for p in a.iter() {
            let (i, _) = tb.nearest(*p);
            let q = tb.point(i);
            let (j, _) = tc.nearest(q);
            let r = tc.point(j);
            expect += p.dist(&r);
        }
        expect /= a.len() as f64;
        assert!((tape.value(node).item() - expect).abs() < 1e-12);

        // Degenerate cycle X = Y = Z with identity is exactly zero.
        let mut tape = Tape::<f64>::new();
        let zero = cy3(
            &mut tape,
            &mut IdentityDeformer,
            &[&a, &a, &a],
            &[&ta, &ta, &ta],
            0,
            1,
            2,
        )
        .unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn l_cy_term_count_and_manual_sum() {
        let a = random_cloud(7, 8);
        let b = random_cloud(8, 8);
        let c = random_cloud(9, 8);
        let (ta, tb, tc) = (KdTree::build(&a), KdTree::build(&b), KdTree::build(&c));
        let batch = TripletBatch::new([&a, &b, &c], [&ta, &tb, &tc], None).unwrap();

        let mut tape = Tape::<f64>::new();
        let (cy2_sum, cy3_sum) = l_cy(&mut tape, &mut IdentityDeformer, &batch).unwrap();

        // Manual term-by-term recomputation: 6 + 6 = 12 terms.
        let clouds = [&a, &b, &c];
        let trees = [&ta, &tb, &tc];
        let mut manual2 = 0.0;
        for (x, y) in ORDERED_PAIRS {
            let mut t = Tape::<f64>::new();
            let id = cy2(&mut t, &mut IdentityDeformer, &clouds, &trees, x, y).unwrap();
            manual2 += t.value(id).item();
        }
        let mut manual3 = 0.0;
        for (x, y, z) in PERMUTATIONS {
            let mut t = Tape::<f64>::new();
            let id = cy3(&mut t, &mut IdentityDeformer, &clouds, &trees, x, y, z).unwrap();
            manual3 += t.value(id).item();
        }
        assert!((tape.value(cy2_sum).item() - manual2).abs() < 1e-12);
        assert!((tape.value(cy3_sum).item() - manual3).abs() < 1e-12);
    }

    #[test]
    fn l_ch_identity_stub_and_term_count() {
        let a = random_cloud(10, 12);
        let ta = KdTree::build(&a);
        let batch = TripletBatch::new([&a, &a, &a], [&ta, &ta, &ta], None).unwrap();
        let mut tape = Tape::<f64>::new();
        let node = l_ch(&mut tape, &mut IdentityDeformer, &batch).unwrap();
        assert_eq!(tape.value(node).item(), 0.0);

        // Six asymmetric terms, verified against chamfer_asym sums.
        let b = random_cloud(11, 12);
        let c = random_cloud(12, 12);
        let (tb, tc) = (KdTree::build(&b), KdTree::build(&c));
        let batch = TripletBatch::new([&a, &b, &c], [&ta, &tb, &tc], None).unwrap();
        let mut tape = Tape::<f64>::new();
        let node = l_ch(&mut tape, &mut IdentityDeformer, &batch).unwrap();
        let clouds = [&a, &b, &c];
        let mut manual = 0.0;
        for (x, y) in ORDERED_PAIRS {
            manual += crate::pointcloud::chamfer_asym(clouds[x], clouds[y]);
        }
        assert!((tape.value(node).item() - manual).abs() < 1e-12);
    }

    #[test]
    fn sr_identity_stub_measures_transform_displacement() {
        let x = random_cloud(13, 10);
        // Pure translation: with f = identity, SR = ‖t‖ exactly.
        let t = Point3::new(0.01, -0.02, 0.005);
        let psi = AugmentationTransform::new(0.0, [1.0; 3], t, false).unwrap();
        let psi_x = psi.apply(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let node = sr(&mut tape, &mut IdentityDeformer, &[&x, &psi_x], 0, 1).unwrap();
        assert!((tape.value(node).item() - t.norm()).abs() < 1e-12);

        // Identity transform gives zero.
        let psi0 = AugmentationTransform::identity();
        let same = psi0.apply(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let node = sr(&mut tape, &mut IdentityDeformer, &[&x, &same], 0, 1).unwrap();
        assert_eq!(tape.value(node).item(), 0.0);
    }

    #[test]
    fn sr_random_transform_matches_per_point_mean() {
        let x = random_cloud(14, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let psi = AugmentationTransform::sample(&mut rng);
        let psi_x = psi.apply(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let node = sr(&mut tape, &mut IdentityDeformer, &[&x, &psi_x], 0, 1).unwrap();
        let expect: f64 = x
            .iter()
            .zip(psi_x.iter())
            .map(|(p, q)| p.dist(q))
            .sum::<f64>()
            / x.len() as f64;
        assert!((tape.value(node).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn l_sr_is_sum_of_three_terms() {
        let a = random_cloud(16, 8);
        let b = random_cloud(17, 8);
        let c = random_cloud(18, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let psis = [
            AugmentationTransform::sample_self_reconstruction(&mut rng),
            AugmentationTransform::sample_self_reconstruction(&mut rng),
            AugmentationTransform::sample_self_reconstruction(&mut rng),
        ];
        let images: Vec<PointCloud> = psis
            .iter()
            .zip([&a, &b, &c])
            .map(|(psi, cl)| psi.apply(cl).unwrap())
            .collect();
        let slots: Vec<&PointCloud> = vec![&a, &b, &c, &images[0], &images[1], &images[2]];

        let mut tape = Tape::<f64>::new();
        let total = l_sr(&mut tape, &mut IdentityDeformer, &slots).unwrap();
        let mut manual = 0.0;
        for x in 0..3 {
            let mut t = Tape::<f64>::new();
            let id = sr(&mut t, &mut IdentityDeformer, &slots, x, x + 3).unwrap();
            manual += t.value(id).item();
        }
        assert!((tape.value(total).item() - manual).abs() < 1e-12);
        assert!(tape.value(total).item() >= 0.0);
    }

    #[test]
    fn l_total_matches_standalone_terms_and_respects_schedule() {
        let a = random_cloud(20, 10);
        let b = random_cloud(21, 10);
        let c = random_cloud(22, 10);
        let (ta, tb, tc) = (KdTree::build(&a), KdTree::build(&b), KdTree::build(&c));
        let batch = TripletBatch::new([&a, &b, &c], [&ta, &tb, &tc], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let psis = [
            AugmentationTransform::sample_self_reconstruction(&mut rng),
            AugmentationTransform::sample_self_reconstruction(&mut rng),
            AugmentationTransform::sample_self_reconstruction(&mut rng),
        ];
        let sr_clouds_vec = apply_sr_transforms(&batch, &psis).unwrap();
        let sr_clouds: [PointCloud; 3] = [
            sr_clouds_vec[0].clone(),
            sr_clouds_vec[1].clone(),
            sr_clouds_vec[2].clone(),
        ];
        let cfg = LossConfig::default();

        // epoch 29: SR included; epoch 30: excluded.
        let mut tape = Tape::<f64>::new();
        let before = l_total(&mut tape, &mut IdentityDeformer, &batch, Some(&sr_clouds), &cfg, 29).unwrap();
        assert!(before.report.sr_active);
        let mut tape = Tape::<f64>::new();
        let after = l_total(&mut tape, &mut IdentityDeformer, &batch, Some(&sr_clouds), &cfg, 30).unwrap();
        assert!(!after.report.sr_active);
        assert_eq!(after.report.l_sr, 0.0);

        // Components sum to the total.
        let r = &before.report;
        assert!((r.l_ch + r.l_cy2 + r.l_cy3 + r.l_sr - r.l_total).abs() < 1e-9);

        // And equal the standalone evaluations.
        let mut t = Tape::<f64>::new();
        let ch = l_ch(&mut t, &mut IdentityDeformer, &batch).unwrap();
        assert!((r.l_ch - t.value(ch).item()).abs() < 1e-12);
        let (c2, c3) = l_cy(&mut t, &mut IdentityDeformer, &batch).unwrap();
        assert!((r.l_cy2 - t.value(c2).item()).abs() < 1e-12);
        assert!((r.l_cy3 - t.value(c3).item()).abs() < 1e-12);

        // lambda = 0 reduces to Chamfer (+ SR before the cutoff).
        let cfg0 = LossConfig { lambda_cy: 0.0, ..cfg };
        let mut tape = Tape::<f64>::new();
        let ablated = l_total(&mut tape, &mut IdentityDeformer, &batch, Some(&sr_clouds), &cfg0, 50).unwrap();
        assert!((ablated.report.l_total - ablated.report.l_ch).abs() < 1e-12);
        assert_eq!(ablated.report.l_cy2, 0.0);

        // lambda = inf keeps only the cycle terms.
        let cfg_inf = LossConfig { lambda_cy: f64::INFINITY, ..cfg };
        let mut tape = Tape::<f64>::new();
        let cyc = l_total(&mut tape, &mut IdentityDeformer, &batch, Some(&sr_clouds), &cfg_inf, 0).unwrap();
        assert!((cyc.report.l_total - (cyc.report.l_cy2 + cyc.report.l_cy3)).abs() < 1e-12);
        assert_eq!(cyc.report.l_ch, 0.0);
        assert!(!cyc.report.sr_active);
    }

    #[test]
    fn l_total_all_terms_zero_for_identity_on_equal_clouds() {
        let a = random_cloud(24, 12);
        let ta = KdTree::build(&a);
        let batch = TripletBatch::new([&a, &a, &a], [&ta, &ta, &ta], None).unwrap();
        let psis = [
            AugmentationTransform::identity(),
            AugmentationTransform::identity(),
            AugmentationTransform::identity(),
        ];
        let sr_vec = apply_sr_transforms(&batch, &psis).unwrap();
        let sr_clouds = [sr_vec[0].clone(), sr_vec[1].clone(), sr_vec[2].clone()];
        let mut tape = Tape::<f64>::new();
        let out = l_total(
            &mut tape,
            &mut IdentityDeformer,
            &batch,
            Some(&sr_clouds),
            &LossConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(out.report.l_total, 0.0);
        assert_eq!(out.report.l_ch, 0.0);
        assert_eq!(out.report.l_cy2, 0.0);
        assert_eq!(out.report.l_cy3, 0.0);
        assert_eq!(out.report.l_sr, 0.0);
    }

    #[test]
    fn l_cy_and_l_ch_are_invariant_to_triplet_relabeling() {
        let a = random_cloud(25, 10);
        let b = random_cloud(26, 10);
        let c = random_cloud(27, 10);
        let (ta, tb, tc) = (KdTree::build(&a), KdTree::build(&b), KdTree::build(&c));

        let eval = |order: [usize; 3]| -> (f64, f64, f64) {
            let clouds = [&a, &b, &c];
            let trees = [&ta, &tb, &tc];
            let batch = TripletBatch::new(
                [clouds[order[0]], clouds[order[1]], clouds[order[2]]],
                [trees[order[0]], trees[order[1]], trees[order[2]]],
                None,
            )
            .unwrap();
            let mut tape = Tape::<f64>::new();
            let (c2, c3) = l_cy(&mut tape, &mut IdentityDeformer, &batch).unwrap();
            let ch = l_ch(&mut tape, &mut IdentityDeformer, &batch).unwrap();
            (
                tape.value(c2).item(),
                tape.value(c3).item(),
                tape.value(ch).item(),
            )
        };
        let base = eval([0, 1, 2]);
        for order in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let got = eval(order);
            assert!((base.0 - got.0).abs() < 1e-12);
            assert!((base.1 - got.1).abs() < 1e-12);
            assert!((base.2 - got.2).abs() < 1e-12);
        }
    }

    #[test]
    fn per_part_chamfer_reduces_to_plain_for_single_label() {
        let a = random_cloud(28, 10);
        let b = random_cloud(29, 10);
        let c = random_cloud(30, 10);
        let (ta, tb, tc) = (KdTree::build(&a), KdTree::build(&b), KdTree::build(&c));
        let zeros = vec![0u32; 10];
        let batch = TripletBatch::new(
            [&a, &b, &c],
            [&ta, &tb, &tc],
            Some([&zeros, &zeros, &zeros]),
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let pp = l_ch_perpart(&mut tape, &mut IdentityDeformer, &batch).unwrap();
        let plain = l_ch(&mut tape, &mut IdentityDeformer, &batch).unwrap();
        assert!((tape.value(pp).item() - tape.value(plain).item()).abs() < 1e-12);
    }

    #[test]
    fn per_part_chamfer_matches_restricted_double_loop() {
        // Hand-built 6-point, 2-label clouds.
        let a = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.2, 0.0, 0.0),
            Point3::new(0.4, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(1.2, 1.0, 0.0),
            Point3::new(1.4, 1.0, 0.0),
        ])
        .unwrap();
        let b = PointCloud::new(vec![
            Point3::new(0.1, 0.05, 0.0),
            Point3::new(0.3, -0.05, 0.0),
            Point3::new(0.5, 0.0, 0.0),
            Point3::new(1.1, 1.05, 0.0),
            Point3::new(1.3, 0.95, 0.0),
            Point3::new(1.5, 1.0, 0.0),
        ])
        .unwrap();
        let la = vec![0u32, 0, 0, 1, 1, 1];
        let lb = vec![0u32, 0, 1, 1, 1, 0];
        let (ta, tb) = (KdTree::build(&a), KdTree::build(&b));
        let batch =
            TripletBatch::new([&a, &b, &a], [&ta, &tb, &ta], Some([&la, &lb, &la])).unwrap();

        let mut tape = Tape::<f64>::new();
        let node = l_ch_perpart(&mut tape, &mut IdentityDeformer, &batch).unwrap();

        // Restricted double-loop oracle over the six ordered pairs.
        let clouds = [&a, &b, &a];
        let labels: [&[u32]; 3] = [&la, &lb, &la];
        let mut expect = 0.0;
        for (x, y) in ORDERED_PAIRS {
            let (src, dst) = (clouds[x], clouds[y]);
            let (src_l, dst_l) = (labels[x], labels[y]);
            let m = dst.len() as f64;
            let mut part_labels: Vec<u32> = dst_l.to_vec();
            part_labels.sort_unstable();
            part_labels.dedup();
            for &label in &part_labels {
                let dst_pts: Vec<&Point3> = dst
                    .points()
                    .iter()
                    .zip(dst_l)
                    .filter(|(_, &l)| l == label)
                    .map(|(p, _)| p)
                    .collect();
                let src_pts: Vec<&Point3> = {
                    let matching: Vec<&Point3> = src
                        .points()
                        .iter()
                        .zip(src_l)
                        .filter(|(_, &l)| l == label)
                        .map(|(p, _)| p)
                        .collect();
                    if matching.is_empty() {
                        src.points().iter().collect()
                    } else {
                        matching
                    }
                };
                let mut acc = 0.0;
                for q in &dst_pts {
                    let mut best = f64::INFINITY;
                    for p in &src_pts {
                        best = best.min(p.dist(q));
                    }
                    acc += best;
                }
                expect += (dst_pts.len() as f64 / m) * (acc / dst_pts.len() as f64);
            }
        }
        assert!((tape.value(node).item() - expect).abs() < 1e-12);
    }
}
