// scratch probe: distribution of per-entry FD mismatches
use cycledeform::autodiff::{Shape, SourceRows, Tape, Tensor, NodeId, AutodiffError};
use cycledeform::model::{Model, ModelConfig, ModelDeformer, Deformer, PairSegment};
use cycledeform::pointcloud::{Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| Point3::new(
        rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9),
    )).collect()).unwrap()
}

fn main() {
    let seed = 7u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // burn the same draws as the suite does before the composite section: skip — just build fresh
    let model: Model<f64> = Model::init(ModelConfig::toy(8), seed ^ 0x5eed);
    let a = random_cloud(&mut rng, 24).normalize_bbox().unwrap();
    let b = random_cloud(&mut rng, 24).normalize_bbox().unwrap();
    let config = model.config.clone();
    let flat: Vec<Tensor<f64>> = model.params().iter().map(|t| (*t).clone()).collect();

    let eval = |params: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.var(p.clone()).unwrap()).collect();
        let mut deformer = ModelDeformer::from_param_nodes(&mut tape, &config, &ids, &[&a, &b]).unwrap();
        let input = tape.constant(Tensor::from_points(&a.to_arrays())).unwrap();
        let out = deformer.deform(&mut tape, input, &[PairSegment{source_slot:0,target_slot:1,start:0,len:a.len()}]).unwrap();
        let loss = tape.chamfer_asym(out, SourceRows::All, &b.to_arrays()).unwrap();
        let v = tape.value(loss).item();
        let mut grads = tape.backward(loss).unwrap();
        let gs = ids.iter().map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))).collect();
        (v, gs)
    };
    let (_, analytic) = eval(&flat);
    let h = 1e-4;
    let mut work = flat.clone();
    let mut bad = 0; let mut total = 0; let mut worst = (0.0f64, 0usize, 0usize);
    for pi in 0..flat.len() {
        for ei in 0..flat[pi].len() {
            let orig = flat[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let (vp, _) = {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = work.iter().map(|p| tape.var(p.clone()).unwrap()).collect();
                let mut deformer = ModelDeformer::from_param_nodes(&mut tape, &config, &ids, &[&a, &b]).unwrap();
                let input = tape.constant(Tensor::from_points(&a.to_arrays())).unwrap();
                let out = deformer.deform(&mut tape, input, &[PairSegment{source_slot:0,target_slot:1,start:0,len:a.len()}]).unwrap();
                let loss = tape.chamfer_asym(out, SourceRows::All, &b.to_arrays()).unwrap();
                (tape.value(loss).item(), ())
            };
            work[pi].data_mut()[ei] = orig - h;
            let (vm, _) = {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = work.iter().map(|p| tape.var(p.clone()).unwrap()).collect();
                let mut deformer = ModelDeformer::from_param_nodes(&mut tape, &config, &ids, &[&a, &b]).unwrap();
                let input = tape.constant(Tensor::from_points(&a.to_arrays())).unwrap();
                let out = deformer.deform(&mut tape, input, &[PairSegment{source_slot:0,target_slot:1,start:0,len:a.len()}]).unwrap();
                let loss = tape.chamfer_asym(out, SourceRows::All, &b.to_arrays()).unwrap();
                (tape.value(loss).item(), ())
            };
            work[pi].data_mut()[ei] = orig;
            let fd = (vp - vm) / (2.0 * h);
            let an = analytic[pi].data()[ei];
            if an.abs() < 1e-8 && fd.abs() < 1e-8 { continue; }
            total += 1;
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            if rel > 1e-3 { bad += 1; if rel > worst.0 { worst = (rel, pi, ei); } }
        }
    }
    println!("total compared {total}, bad {bad}, worst rel {} at param {} entry {}", worst.0, worst.1, worst.2);
}
