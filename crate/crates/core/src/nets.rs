//! Learned instance features: EdgeConv stacks over the instance graph, a
//! T-Net + PointNet shape encoder, and self/cross attention per feature kind.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::InstanceGraph;
use crate::instances::SemanticInstance;
use crate::tensor::{concat, ParamStore, Tape, Tensor, Var};

/// Feature kinds fused into the matching descriptor, in concatenation order.
pub const KINDS: [&str; 3] = ["o", "s", "h"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_categories: usize,
    /// Shape points per instance (K).
    pub shape_points: usize,
    pub gcn_dims: [usize; 3],
    pub shape_dims: [usize; 3],
    pub tnet_hidden: [usize; 2],
    /// Meters per unit of the normalized centroid fed to the spatial stack.
    pub coord_scale: f64,
    /// Initial attention logit between two identical standardized features.
    pub attention_gain: f64,
    /// Initial affinity between two identical standardized fused features.
    pub affinity_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_categories: 12,
            shape_points: 128,
            gcn_dims: [64, 64, 128],
            shape_dims: [64, 128, 128],
            tnet_hidden: [32, 32],
            coord_scale: 10.0,
            attention_gain: 4.0,
            affinity_gain: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = self.gcn_dims.iter().chain(&self.shape_dims).chain(&self.tnet_hidden);
        if self.num_categories == 0 || self.shape_points == 0 || dims.clone().any(|&d| d == 0) {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.gcn_dims[2] != self.shape_dims[2] {
            return Err(Error::validation(
                "graph and shape feature widths must agree so the kinds can be fused",
            ));
        }
        if !(self.coord_scale > 0.0) {
            return Err(Error::validation("coord_scale must be > 0"));
        }
        if !(self.attention_gain.is_finite() && self.affinity_gain.is_finite()) {
            return Err(Error::validation("initial gains must be finite"));
        }
        Ok(())
    }

    /// Width of one feature kind.
    pub fn feature_dim(&self) -> usize {
        self.gcn_dims[2]
    }

    /// Width of the fused descriptor.
    pub fn fused_dim(&self) -> usize {
        3 * self.feature_dim()
    }
}

/// Network configuration plus its named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights drawn from `seed`. Graph and shape layers are uniform in
    /// `±sqrt(1/fan_in)`; see the body for the attention and affinity init.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut ChaCha8Rng| {
            p.add_uniform(format!("{name}.weight"), &[out, fan_in], fan_in, rng)?;
            p.add_uniform(format!("{name}.bias"), &[out], fan_in, rng)?;
            Ok::<_, Error>(())
        };
        for (stack, input) in [("gcn_spatial", 3), ("gcn_semantic", config.num_categories)] {
            let mut d = input;
            for (l, &out) in config.gcn_dims.iter().enumerate() {
                linear(&mut p, &format!("{stack}.layer{l}"), 2 * d, out, &mut rng)?;
                d = out;
            }
        }
        let [t0, t1] = config.tnet_hidden;
        linear(&mut p, "shape.tnet.layer0", 3, t0, &mut rng)?;
        linear(&mut p, "shape.tnet.layer1", t0, t1, &mut rng)?;
        p.add("shape.tnet.out.weight", Tensor::zeros(&[9, t1]))?;
        p.add(
            "shape.tnet.out.bias",
            Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        )?;
        let mut d = 3;
        for (l, &out) in config.shape_dims.iter().enumerate() {
            linear(&mut p, &format!("shape.mlp{l}"), d, out, &mut rng)?;
            p.add(format!("shape.norm{l}.scale"), Tensor::full(&[out], 1.0))?;
            p.add(format!("shape.norm{l}.shift"), Tensor::zeros(&[out]))?;
            d = out;
        }
        // Attention and affinity start as scaled identities: on standardized
        // inputs, uniform random projections give near-uniform attention and
        // every instance collapses onto the scene mean.
        let f = config.feature_dim();
        let qk = (config.attention_gain / f as f64).sqrt();
        for kind in KINDS {
            for stage in ["self", "cross"] {
                for (proj, gain) in [("q", qk), ("k", qk), ("v", 1.0)] {
                    let name = format!("attn.{kind}.{stage}.{proj}");
                    p.add(format!("{name}.weight"), Tensor::eye(f).map(|v| v * gain))?;
                    p.add(format!("{name}.bias"), Tensor::zeros(&[f]))?;
                }
            }
        }
        let fd = config.fused_dim();
        p.add("affinity.W", Tensor::eye(fd).map(|v| v * config.affinity_gain / fd as f64))?;
        p.add("dustbin.z", Tensor::new(vec![1, 1], vec![1.0])?)?;
        Ok(Model { config, params: p })
    }

    /// Parameter names and shapes, sorted by name.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let mut s: Vec<_> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        s.sort();
        s
    }

    pub fn p<'t>(&self, tape: &'t Tape, name: &str) -> Var<'t> {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        tape.param(&self.params, id)
    }
}

/// Network inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    /// `[M, 3]` centroids relative to the scene mean, divided by `coord_scale`.
    pub positions: Tensor,
    /// `[M, C]` category one-hots.
    pub one_hot: Tensor,
    /// `[M, K, 3]` shape points relative to their instance centroid.
    pub shape_points: Tensor,
    /// Flattened `[M, degree]` neighbor table.
    pub neighbors: Vec<usize>,
    pub degree: usize,
}

impl SceneInput {
    pub fn new(instances: &[SemanticInstance], graph: &InstanceGraph, cfg: &ModelConfig) -> Result<Self> {
        let m = instances.len();
        if m == 0 {
            return Err(Error::validation("scene has no instances"));
        }
        if graph.node_count() != m {
            return Err(Error::validation(format!(
                "graph has {} nodes for {m} instances",
                graph.node_count()
            )));
        }
        let (c, k) = (cfg.num_categories, cfg.shape_points);
        let mut mean = [0.0; 3];
        for inst in instances {
            for (a, v) in mean.iter_mut().zip(inst.centroid.to_array()) {
                *a += v / m as f64;
            }
        }
        let mut positions = Vec::with_capacity(3 * m);
        let mut one_hot = Vec::with_capacity(c * m);
        let mut shape = Vec::with_capacity(3 * k * m);
        for inst in instances {
            if inst.one_hot.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "scene_input",
                    lhs: vec![c],
                    rhs: vec![inst.one_hot.len()],
                });
            }
            if inst.shape_points.len() != k {
                return Err(Error::validation(format!(
                    "instance {} has {} shape points, expected K = {k}",
                    inst.id,
                    inst.shape_points.len()
                )));
            }
            let o = inst.centroid.to_array();
            positions.extend((0..3).map(|a| (o[a] - mean[a]) / cfg.coord_scale));
            one_hot.extend_from_slice(&inst.one_hot);
            for p in &inst.shape_points {
                shape.extend([p.x - o[0], p.y - o[1], p.z - o[2]]);
            }
        }
        let (neighbors, degree) = graph.aggregation_index();
        Ok(SceneInput {
            positions: Tensor::new(vec![m, 3], positions)?,
            one_hot: Tensor::new(vec![m, c], one_hot)?,
            shape_points: Tensor::new(vec![m, k, 3], shape)?,
            neighbors,
            degree,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `x · Wᵀ + b` for row-major `x` of shape `[R, in]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    x.matmul_t(w, false, true)?.add(b)
}

fn linear_named<'t>(model: &Model, tape: &'t Tape, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
    linear(
        x,
        &model.p(tape, &format!("{name}.weight")),
        &model.p(tape, &format!("{name}.bias")),
    )
}

/// One EdgeConv layer: `out_i = Σ_{j∈N(i)} relu(W [f_i ; f_i − f_j] + b)`.
pub fn edge_conv<'t>(
    x: &Var<'t>,
    w: &Var<'t>,
    b: &Var<'t>,
    neighbors: &[usize],
    degree: usize,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let m = shape[0];
    if neighbors.len() != m * degree {
        return Err(Error::ShapeMismatch {
            op: "edge_conv",
            lhs: shape,
            rhs: vec![neighbors.len(), degree],
        });
    }
    let centers: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, degree)).collect();
    let fi = x.gather_rows(&centers)?;
    let fj = x.gather_rows(neighbors)?;
    let pair = concat(&[fi, fi.sub(&fj)?], 1)?;
    let h = linear(&pair, w, b)?.relu();
    let out = w.shape()[0];
    h.reshape(&[m, degree, out])?.sum_axis(1)
}

/// Three EdgeConv layers under `prefix` (`gcn_spatial` or `gcn_semantic`).
pub fn gcn_forward<'t>(
    model: &Model,
    tape: &'t Tape,
    prefix: &str,
    x: &Var<'t>,
    neighbors: &[usize],
    degree: usize,
) -> Result<Var<'t>> {
    let mut h = *x;
    for l in 0..3 {
        let w = model.p(tape, &format!("{prefix}.layer{l}.weight"));
        let b = model.p(tape, &format!("{prefix}.layer{l}.bias"));
        if h.shape()[1] * 2 != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                lhs: h.shape(),
                rhs: w.shape(),
            });
        }
        h = edge_conv(&h, &w, &b, neighbors, degree)?;
    }
    Ok(h)
}

/// The 3×3 alignment predicted by the T-Net, shape `[M, 3, 3]`.
pub fn tnet<'t>(model: &Model, tape: &'t Tape, points: &Var<'t>) -> Result<Var<'t>> {
    let s = points.shape();
    let (m, k) = (s[0], s[1]);
    let flat = points.reshape(&[m * k, 3])?;
    let h = linear_named(model, tape, "shape.tnet.layer0", &flat)?.relu();
    let h = linear_named(model, tape, "shape.tnet.layer1", &h)?.relu();
    let width = h.shape()[1];
    let pooled = h.reshape(&[m, k, width])?.max_pool(1)?;
    linear_named(model, tape, "shape.tnet.out", &pooled)?.reshape(&[m, 3, 3])
}

/// Encodes `[M, K, 3]` centered points into `[M, 128]` descriptors.
pub fn shape_encode<'t>(model: &Model, tape: &'t Tape, points: &Var<'t>) -> Result<Var<'t>> {
    let s = points.shape();
    if s.len() != 3 || s[1] != model.config.shape_points || s[2] != 3 {
        return Err(Error::validation(format!(
            "shape points must be [M, {}, 3], got {s:?}",
            model.config.shape_points
        )));
    }
    let (m, k) = (s[0], s[1]);
    let h_mat = tnet(model, tape, points)?;
    // p̃ᵀ = H pᵀ  ⇔  p̃ = p Hᵀ
    let aligned = points.matmul_t(&h_mat, false, true)?;
    let mut h = aligned.reshape(&[m * k, 3])?;
    for l in 0..3 {
        let z = linear_named(model, tape, &format!("shape.mlp{l}"), &h)?;
        let width = z.shape()[1];
        let z = z.reshape(&[m, k, width])?.feature_norm(
            &model.p(tape, &format!("shape.norm{l}.scale")),
            &model.p(tape, &format!("shape.norm{l}.shift")),
            1,
        )?;
        h = z.relu().reshape(&[m * k, width])?;
    }
    let width = h.shape()[1];
    h.reshape(&[m, k, width])?.max_pool(1)
}

/// Attention weights `softmax_j(q_iᵀ k_j)` of queries from `x` over keys of `y`.
pub fn attention_weights<'t>(
    model: &Model,
    tape: &'t Tape,
    prefix: &str,
    x: &Var<'t>,
    y: &Var<'t>,
) -> Result<Var<'t>> {
    let q = linear_named(model, tape, &format!("{prefix}.q"), x)?;
    let k = linear_named(model, tape, &format!("{prefix}.k"), y)?;
    q.matmul_t(&k, false, true)?.softmax(1)
}

/// `out_i = Σ_j α_ij v_j` with queries from `x` and keys/values from `y`.
pub fn attend<'t>(model: &Model, tape: &'t Tape, prefix: &str, x: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
    let alpha = attention_weights(model, tape, prefix, x, y)?;
    let v = linear_named(model, tape, &format!("{prefix}.v"), y)?;
    alpha.matmul(&v)
}

/// Self-attention of one scene under `attn.{kind}.self`.
pub fn self_attention<'t>(model: &Model, tape: &'t Tape, kind: &str, x: &Var<'t>) -> Result<Var<'t>> {
    attend(model, tape, &format!("attn.{kind}.self"), x, x)
}

/// Updates `x` from the other scene `y` under `attn.{kind}.cross`.
pub fn cross_attention<'t>(
    model: &Model,
    tape: &'t Tape,
    kind: &str,
    x: &Var<'t>,
    y: &Var<'t>,
) -> Result<Var<'t>> {
    attend(model, tape, &format!("attn.{kind}.cross"), x, y)
}

/// Per-kind and fused features of one scene, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SceneFeatures<'t> {
    pub o: Var<'t>,
    pub s: Var<'t>,
    pub h: Var<'t>,
    /// `[M, 384]` concatenation `[o; s; h]`.
    pub fused: Var<'t>,
}

/// Plain-value copy of [`SceneFeatures`].
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatureSet {
    pub o: Tensor,
    pub s: Tensor,
    pub h: Tensor,
    pub fused: Tensor,
}

impl SceneFeatures<'_> {
    pub fn values(&self) -> InstanceFeatureSet {
        InstanceFeatureSet {
            o: (*self.o.value()).clone(),
            s: (*self.s.value()).clone(),
            h: (*self.h.value()).clone(),
            fused: (*self.fused.value()).clone(),
        }
    }
}

/// Raw per-kind features of one scene before attention.
pub fn encode_scene<'t>(model: &Model, tape: &'t Tape, scene: &SceneInput) -> Result<[Var<'t>; 3]> {
    let o = gcn_forward(
        model,
        tape,
        "gcn_spatial",
        &tape.constant(scene.positions.clone()),
        &scene.neighbors,
        scene.degree,
    )?;
    let s = gcn_forward(
        model,
        tape,
        "gcn_semantic",
        &tape.constant(scene.one_hot.clone()),
        &scene.neighbors,
        scene.degree,
    )?;
    let h = shape_encode(model, tape, &tape.constant(scene.shape_points.clone()))?;
    Ok([o, s, h])
}

fn collect3<'t>(v: [Result<Var<'t>>; 3]) -> Result<[Var<'t>; 3]> {
    let [a, b, c] = v;
    Ok([a?, b?, c?])
}

/// Zero mean and unit variance per feature over the instances of one scene.
pub fn standardize<'t>(tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
    let width = x.shape()[1];
    let ones = tape.constant(Tensor::full(&[width], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[width]));
    x.feature_norm(&ones, &zeros, 0)
}

/// Full feature pipeline for a scene pair: encoders, per-scene
/// standardization, self-attention within each scene, cross-attention across
/// scenes, then fusion.
pub fn extract_features<'t>(
    model: &Model,
    tape: &'t Tape,
    x: &SceneInput,
    y: &SceneInput,
) -> Result<(SceneFeatures<'t>, SceneFeatures<'t>)> {
    let fx = encode_scene(model, tape, x)?.map(|v| standardize(tape, &v));
    let fy = encode_scene(model, tape, y)?.map(|v| standardize(tape, &v));
    let (fx, fy) = (collect3(fx)?, collect3(fy)?);
    let mut out_x = Vec::with_capacity(3);
    let mut out_y = Vec::with_capacity(3);
    for (kind, (a, b)) in KINDS.iter().zip(fx.iter().zip(&fy)) {
        let sa = self_attention(model, tape, kind, a)?;
        let sb = self_attention(model, tape, kind, b)?;
        out_x.push(cross_attention(model, tape, kind, &sa, &sb)?);
        out_y.push(cross_attention(model, tape, kind, &sb, &sa)?);
    }
    let fuse = |v: &[Var<'t>]| -> Result<SceneFeatures<'t>> {
        Ok(SceneFeatures {
            o: v[0],
            s: v[1],
            h: v[2],
            fused: concat(v, 1)?,
        })
    };
    Ok((fuse(&out_x)?, fuse(&out_y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::graph::build_graph_from_points;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_categories: 4,
            shape_points: 6,
            gcn_dims: [5, 4, 6],
            shape_dims: [5, 4, 6],
            tnet_hidden: [4, 3],
            coord_scale: 10.0,
            attention_gain: 4.0,
            affinity_gain: 4.0,
        }
    }

    fn random_instances(rng: &mut impl Rng, m: usize, cfg: &ModelConfig) -> Vec<SemanticInstance> {
        (0..m)
            .map(|id| {
                let c = Point3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..2.0));
                let pts = (0..cfg.shape_points)
                    .map(|_| Point3::new(c.x + rng.random_range(-1.0..1.0), c.y + rng.random_range(-1.0..1.0), c.z + rng.random_range(-1.0..1.0)))
                    .collect();
                SemanticInstance::new(id, rng.random_range(0..cfg.num_categories), cfg.num_categories, c, pts, cfg.shape_points).unwrap()
            })
            .collect()
    }

    fn scene(rng: &mut impl Rng, m: usize, k: usize, cfg: &ModelConfig) -> SceneInput {
        let inst = random_instances(rng, m, cfg);
        let g = build_graph_from_points(&inst.iter().map(|i| i.centroid).collect::<Vec<_>>(), k).unwrap();
        SceneInput::new(&inst, &g, cfg).unwrap()
    }

    fn randomize(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in model.params.get_mut(id).value.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn default_parameter_names() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        for name in [
            "gcn_spatial.layer0.weight",
            "gcn_semantic.layer2.bias",
            "shape.tnet.out.bias",
            "shape.mlp2.weight",
            "shape.norm0.scale",
            "attn.o.self.q.weight",
            "attn.h.cross.v.bias",
            "affinity.W",
            "dustbin.z",
        ] {
            assert!(m.params.id(name).is_some(), "{name}");
        }
        assert_eq!(m.params.by_name("gcn_spatial.layer0.weight").unwrap().value.shape(), &[64, 6]);
        assert_eq!(m.params.by_name("affinity.W").unwrap().value.shape(), &[384, 384]);
        assert_eq!(m.params.by_name("dustbin.z").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn edge_conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, d, out, deg) = (7, 3, 4, 3);
        let x = Tensor::new(vec![m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![out, 2 * d], (0..out * 2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::vector((0..out).map(|_| rng.random_range(-0.5..0.5)).collect());
        let pts: Vec<Point3> = (0..m).map(|_| Point3::new(rng.random(), rng.random(), 0.0)).collect();
        let g = build_graph_from_points(&pts, deg).unwrap();
        let (nbr, deg) = g.aggregation_index();
        let tape = Tape::new();
        let got = edge_conv(&tape.constant(x.clone()), &tape.constant(w.clone()), &tape.constant(b.clone()), &nbr, deg).unwrap();
        for i in 0..m {
            for o in 0..out {
                let mut acc = 0.0;
                for &j in g.neighbors(i) {
                    let mut z = b.data()[o];
                    for c in 0..d {
                        z += w.at2(o, c) * x.at2(i, c) + w.at2(o, d + c) * (x.at2(i, c) - x.at2(j, c));
                    }
                    acc += z.max(0.0);
                }
                assert!((got.value().at2(i, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_features_and_bias_give_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::full(&[5, 6], 0.7));
        let b = tape.constant(Tensor::zeros(&[5]));
        let nbr = vec![1, 2, 0, 2, 0, 1, 0, 1];
        let y = edge_conv(&x, &w, &b, &nbr, 2).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_uses_itself() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 2).unwrap();
        randomize(&mut model, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = scene(&mut rng, 1, 10, &cfg);
        assert_eq!((s.neighbors.clone(), s.degree), (vec![0], 1));
        let tape = Tape::new();
        let out = gcn_forward(&model, &tape, "gcn_semantic", &tape.constant(s.one_hot.clone()), &s.neighbors, s.degree).unwrap();
        assert_eq!(out.shape(), vec![1, 6]);
    }

    #[test]
    fn identity_tnet_at_init() {
        let cfg = small_config();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = scene(&mut rng, 3, 2, &cfg);
        let tape = Tape::new();
        let h = tnet(&model, &tape, &tape.constant(s.shape_points.clone())).unwrap();
        for m in 0..3 {
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert_eq!(h.value().data()[m * 9 + r * 3 + c], want);
                }
            }
        }
    }

    #[test]
    fn shape_encoding_ignores_point_order() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 7).unwrap();
        randomize(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = scene(&mut rng, 3, 2, &cfg);
        let k = cfg.shape_points;
        let perm = [4, 0, 5, 2, 1, 3];
        let mut permuted = s.shape_points.clone();
        for m in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                for a in 0..3 {
                    permuted.data_mut()[(m * k + dst) * 3 + a] = s.shape_points.data()[(m * k + src) * 3 + a];
                }
            }
        }
        let tape = Tape::new();
        let a = shape_encode(&model, &tape, &tape.constant(s.shape_points.clone())).unwrap();
        let b = shape_encode(&model, &tape, &tape.constant(permuted)).unwrap();
        assert_eq!(a.value().data(), b.value().data());
        assert!(shape_encode(&model, &tape, &tape.constant(Tensor::zeros(&[2, 5, 3]))).is_err());
    }

    /// Inputs with two distinct points encode as their multiset: the
    /// arrangement of the duplicates does not matter.
    #[test]
    fn duplicate_heavy_inputs_encode_as_multiset() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 10).unwrap();
        randomize(&mut model, 11);
        let a = [0.3, -0.2, 0.5];
        let b = [-0.4, 0.6, 0.1];
        let mk = |pattern: [usize; 6]| {
            let mut d = Vec::new();
            for p in pattern {
                d.extend_from_slice(if p == 0 { &a } else { &b });
            }
            Tensor::new(vec![1, 6, 3], d).unwrap()
        };
        let tape = Tape::new();
        let x = shape_encode(&model, &tape, &tape.constant(mk([0, 0, 0, 0, 1, 1]))).unwrap();
        let y = shape_encode(&model, &tape, &tape.constant(mk([1, 0, 0, 1, 0, 0]))).unwrap();
        let z = shape_encode(&model, &tape, &tape.constant(mk([1, 1, 1, 1, 0, 0]))).unwrap();
        assert_eq!(x.value().data(), y.value().data());
        assert!(x.value().max_abs_diff(&z.value()) > 0.0);
    }

    fn attention_oracle(model: &Model, prefix: &str, x: &Tensor, y: &Tensor) -> Vec<Vec<f64>> {
        let get = |n: &str| model.params.by_name(&format!("{prefix}.{n}")).unwrap().value.clone();
        let (wq, bq, wk, bk, wv, bv) = (get("q.weight"), get("q.bias"), get("k.weight"), get("k.bias"), get("v.weight"), get("v.bias"));
        let proj = |w: &Tensor, b: &Tensor, row: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|o| b.data()[o] + (0..row.len()).map(|c| w.at2(o, c) * row[c]).sum::<f64>()).collect()
        };
        (0..x.rows())
            .map(|i| {
                let q = proj(&wq, &bq, x.row(i));
                let scores: Vec<f64> = (0..y.rows())
                    .map(|j| q.iter().zip(proj(&wk, &bk, y.row(j))).map(|(a, b)| a * b).sum())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut out = vec![0.0; wv.rows()];
                for j in 0..y.rows() {
                    let v = proj(&wv, &bv, y.row(j));
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += e[j] / z * vv;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn attention_matches_direct_formula() {
        let cfg = ModelConfig { gcn_dims: [8, 8, 8], shape_dims: [8, 8, 8], ..small_config() };
        let mut model = Model::new(cfg, 12).unwrap();
        randomize(&mut model, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(vec![3, 8], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let s = self_attention(&model, &tape, "o", &xv).unwrap();
        let c = cross_attention(&model, &tape, "s", &xv, &yv).unwrap();
        for (got, want) in [(s, attention_oracle(&model, "attn.o.self", &x, &x)), (c, attention_oracle(&model, "attn.s.cross", &x, &y))] {
            for (i, row) in want.iter().enumerate() {
                for (o, w) in row.iter().enumerate() {
                    assert!((got.value().at2(i, o) - w).abs() < 1e-12);
                }
            }
        }
        let alpha = attention_weights(&model, &tape, "attn.o.self", &xv, &xv).unwrap();
        for i in 0..5 {
            let row = alpha.value().row(i).to_vec();
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_attention_returns_value_projection() {
        let cfg = ModelConfig { gcn_dims: [8, 8, 8], shape_dims: [8, 8, 8], ..small_config() };
        let mut model = Model::new(cfg, 15).unwrap();
        randomize(&mut model, 16);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 8], 0.3));
        let out = self_attention(&model, &tape, "h", &x).unwrap();
        let v = linear_named(&model, &tape, "attn.h.self.v", &x).unwrap();
        assert_eq!(out.value().data(), v.value().data());
        let many = tape.constant(Tensor::full(&[4, 8], 0.3));
        let out = cross_attention(&model, &tape, "h", &many, &x).unwrap();
        let v = linear_named(&model, &tape, "attn.h.cross.v", &x).unwrap();
        for i in 0..4 {
            assert_eq!(out.value().row(i), v.value().row(0));
        }
    }

    #[test]
    fn fused_features_and_equivariance() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 17).unwrap();
        randomize(&mut model, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let xi = random_instances(&mut rng, 6, &cfg);
        let yi = random_instances(&mut rng, 5, &cfg);
        let build = |inst: &[SemanticInstance]| {
            let g = build_graph_from_points(&inst.iter().map(|i| i.centroid).collect::<Vec<_>>(), 3).unwrap();
            SceneInput::new(inst, &g, &cfg).unwrap()
        };
        let tape = Tape::new();
        let (fx, fy) = extract_features(&model, &tape, &build(&xi), &build(&yi)).unwrap();
        assert_eq!(fx.fused.shape(), vec![6, 18]);
        assert_eq!(fy.fused.shape(), vec![5, 18]);
        let v = fx.values();
        for i in 0..6 {
            let row = v.fused.row(i);
            assert_eq!(&row[..6], v.o.row(i));
            assert_eq!(&row[6..12], v.s.row(i));
            assert_eq!(&row[12..], v.h.row(i));
        }

        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<SemanticInstance> = perm.iter().map(|&p| xi[p].clone()).collect();
        let tape2 = Tape::new();
        let (px, _) = extract_features(&model, &tape2, &build(&permuted), &build(&yi)).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = px.fused.value();
            for (u, w) in a.row(dst).iter().zip(v.fused.row(src)) {
                assert!((u - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_value_weights_leave_bias_rows() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 20).unwrap();
        randomize(&mut model, 21);
        for kind in KINDS {
            let id = model.params.id(&format!("attn.{kind}.cross.v.weight")).unwrap();
            model.params.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (x, y) = (scene(&mut rng, 4, 2, &cfg), scene(&mut rng, 3, 2, &cfg));
        let tape = Tape::new();
        let (fx, _) = extract_features(&model, &tape, &x, &y).unwrap();
        let f = fx.fused.value();
        let mut bias = Vec::new();
        for kind in KINDS {
            bias.extend_from_slice(model.params.by_name(&format!("attn.{kind}.cross.v.bias")).unwrap().value.data());
        }
        for i in 0..4 {
            for (a, b) in f.row(i).iter().zip(&bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
