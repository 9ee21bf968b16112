use alloc::format;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::fio::Permutation;
use crate::isu::{isu_iterate, zero_flow, IsuParams, LevelInputs, UpdateConfig};
use crate::mamba::MambaConfig;
use crate::nn::{Bindings, ParamStore};
use crate::pointcloud::{farthest_point_sample, knn, upsample, Aggregation, SetConv};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Geometry of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub coords: Tensor,
    /// Rows of the next finer level (or of the input for level 0).
    pub parent_indices: Vec<usize>,
    /// Rows of the input cloud.
    pub input_indices: Vec<usize>,
    /// `count×k` neighbors of every point among the next finer level.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

/// Point subsets, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    /// Farthest-point sampling level by level; the finest level keeps the
    /// whole cloud when it is small enough. Counts larger than the available
    /// points are clamped.
    pub fn build(points: &Tensor, counts: &[usize], k: usize) -> Result<Self> {
        if points.rank() != 2 || points.cols() != 3 {
            return Err(Error::dim("build_pyramid", &[0, 3], points.shape()));
        }
        if counts.is_empty() || k == 0 {
            return Err(Error::Config("pyramid needs at least one level and k >= 1".into()));
        }
        let mut levels: Vec<PyramidLevel> = Vec::with_capacity(counts.len());
        for (l, &want) in counts.iter().enumerate() {
            let (finer, finer_input) = match levels.last() {
                Some(prev) => (&prev.coords, Some(&prev.input_indices)),
                None => (points, None),
            };
            let n = finer.rows();
            let m = want.min(n);
            let parent = if l == 0 && m == n {
                (0..n).collect()
            } else {
                farthest_point_sample(finer, m)?
            };
            let coords = finer.gather_rows(&parent);
            let input_indices = match finer_input {
                Some(map) => parent.iter().map(|&i| map[i]).collect(),
                None => parent.clone(),
            };
            let kk = k.min(n);
            let neighbors = knn(&coords, finer, kk)?;
            levels.push(PyramidLevel {
                coords,
                parent_indices: parent,
                input_indices,
                neighbors,
                k: kk,
            });
        }
        Ok(Pyramid { levels })
    }
}

/// Per-level predictions.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub level: usize,
    /// Rows of the source cloud this level predicts for.
    pub input_indices: Vec<usize>,
    pub flows: Vec<Var>,
    pub orders: Vec<Permutation>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Finest first.
    pub levels: Vec<LevelOutput>,
    /// Final flow for every source point.
    pub flow: Var,
    /// Coordinates of the finest level.
    pub finest_coords: Tensor,
}

/// The full network: per-level encoders, update operators and feature
/// enhancement, with all parameters in one store.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMambaModel {
    pub config: NetworkConfig,
    pub params: ParamStore,
    feature_enc: Vec<SetConv>,
    context_enc: Vec<SetConv>,
    isu: Vec<IsuParams>,
    /// Enhancement for every level but the finest.
    enhance_src: Vec<SetConv>,
    enhance_tgt: Vec<SetConv>,
}

impl FlowMambaModel {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let mut feature_enc = Vec::new();
        let mut context_enc = Vec::new();
        let mut isu = Vec::new();
        let mut enhance_src = Vec::new();
        let mut enhance_tgt = Vec::new();
        for l in 0..config.levels {
            let fin = if l == 0 { 0 } else { c };
            feature_enc.push(SetConv::new(
                &mut store,
                &format!("enc{l}"),
                fin,
                c,
                Aggregation::WeightedSum,
                &mut rng,
            ));
            context_enc.push(SetConv::new(
                &mut store,
                &format!("ctx{l}"),
                fin,
                c,
                Aggregation::WeightedSum,
                &mut rng,
            ));
        }
        let mamba = MambaConfig {
            channels: c,
            expand: config.expand,
            state: config.state,
            conv_width: config.conv_width,
            zero_output: config.zero_output_proj,
            ..MambaConfig::default()
        };
        for l in 0..config.levels {
            let update = UpdateConfig {
                kind: config.update,
                channels: c,
                motion_channels: config.motion_channels,
                blocks: config.blocks,
                mamba,
                scan: config.scan,
            };
            isu.push(IsuParams::new(
                &mut store,
                &format!("isu{l}"),
                update,
                config.k,
                config.zero_flow_head,
                &mut rng,
            )?);
            if l > 0 {
                enhance_src.push(SetConv::new(
                    &mut store,
                    &format!("enh{l}.src"),
                    c,
                    c,
                    Aggregation::MaxPool,
                    &mut rng,
                ));
                enhance_tgt.push(SetConv::new(
                    &mut store,
                    &format!("enh{l}.tgt"),
                    c,
                    c,
                    Aggregation::MaxPool,
                    &mut rng,
                ));
            }
        }
        Ok(FlowMambaModel {
            config,
            params: store,
            feature_enc,
            context_enc,
            isu,
            enhance_src,
            enhance_tgt,
        })
    }

    /// Level features, finest first.
    fn encode(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        input: &Tensor,
        pyr: &Pyramid,
        enc: &[SetConv],
    ) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(pyr.levels.len());
        let mut prev_coords = tape.constant(input.clone());
        let mut prev_feat = None;
        for (level, conv) in pyr.levels.iter().zip(enc) {
            let centers = tape.constant(level.coords.clone());
            let f = conv.forward(tape, p, centers, prev_coords, prev_feat, &level.neighbors, level.k)?;
            feats.push(f);
            prev_coords = centers;
            prev_feat = Some(f);
        }
        Ok(feats)
    }

    /// Runs the network with the configured iteration count.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, source: &Tensor, target: &Tensor) -> Result<ForwardOutput> {
        self.forward_with_iters(tape, p, source, target, self.config.iters)
    }

    /// Runs the network with `iters` update rounds per level.
    pub fn forward_with_iters(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        source: &Tensor,
        target: &Tensor,
        iters: usize,
    ) -> Result<ForwardOutput> {
        let schedule = alloc::vec![iters; self.config.levels];
        self.forward_schedule(tape, p, source, target, &schedule)
    }

    /// Runs the network with a separate iteration count per level, finest
    /// first.
    pub fn forward_schedule(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        source: &Tensor,
        target: &Tensor,
        iters: &[usize],
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if iters.len() != cfg.levels {
            return Err(Error::dim("forward", &[cfg.levels], &[iters.len()]));
        }
        let ps = Pyramid::build(source, &cfg.points, cfg.k)?;
        let pt = Pyramid::build(target, &cfg.points, cfg.k)?;
        let fs = self.encode(tape, p, source, &ps, &self.feature_enc)?;
        let ft = self.encode(tape, p, target, &pt, &self.feature_enc)?;
        let ctx = self.encode(tape, p, source, &ps, &self.context_enc)?;
        let up_k = cfg.upsample_k;

        let mut outputs: Vec<LevelOutput> = Vec::with_capacity(cfg.levels);
        // State carried from the coarser level: (sf, h, cf, f_enh, g_enh).
        let mut carry: Option<(Var, Var, Var, Var, Var)> = None;
        for l in (0..cfg.levels).rev() {
            let (src_l, tgt_l) = (&ps.levels[l], &pt.levels[l]);
            let pv = tape.constant(src_l.coords.clone());
            let qv = tape.constant(tgt_l.coords.clone());
            let (sf0, h0, cf, f, g) = match carry {
                None => {
                    let h0 = tape.activation(ctx[l], Activation::Tanh);
                    (zero_flow(tape, src_l.coords.rows()), h0, ctx[l], fs[l], ft[l])
                }
                Some((sf, h, cf, fe, ge)) => {
                    let (sc, dc) = (&ps.levels[l + 1].coords, &src_l.coords);
                    let tc = &pt.levels[l + 1].coords;
                    let sf0 = upsample(tape, sc, dc, sf, up_k.min(sc.rows()))?;
                    let h0 = upsample(tape, sc, dc, h, up_k.min(sc.rows()))?;
                    let cf_up = upsample(tape, sc, dc, cf, up_k.min(sc.rows()))?;
                    let cf = tape.add(ctx[l], cf_up)?;
                    let f_up = upsample(tape, sc, dc, fe, up_k.min(sc.rows()))?;
                    let f = tape.add(fs[l], f_up)?;
                    let g_up = upsample(tape, tc, &tgt_l.coords, ge, up_k.min(tc.rows()))?;
                    let g = tape.add(ft[l], g_up)?;
                    (sf0, h0, cf, f, g)
                }
            };
            let inputs = LevelInputs {
                p: pv,
                q: qv,
                f,
                g,
                cf,
                sf0,
                h0,
            };
            let out = isu_iterate(tape, p, &self.isu[l], inputs, iters[l])?;
            if l > 0 {
                let (fe, ge) = self.enhance(tape, p, l, pv, qv, out.sf, out.f, out.g)?;
                carry = Some((out.sf, out.h, cf, fe, ge));
            }
            outputs.push(LevelOutput {
                level: l,
                input_indices: src_l.input_indices.clone(),
                flows: out.flows,
                orders: out.orders,
            });
        }
        outputs.reverse();
        let finest = &outputs[0];
        let last = *finest.flows.last().expect("at least one iteration");
        let flow = if finest.input_indices.len() == source.rows() {
            last
        } else {
            let coords = &ps.levels[0].coords;
            upsample(tape, coords, source, last, up_k.min(coords.rows()))?
        };
        Ok(ForwardOutput {
            levels: outputs,
            flow,
            finest_coords: ps.levels[0].coords.clone(),
        })
    }

    /// Cross-frame enhancement: source features gather target features
    /// around the warped source points and vice versa.
    #[allow(clippy::too_many_arguments)]
    fn enhance(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        level: usize,
        pv: Var,
        qv: Var,
        sf: Var,
        f: Var,
        g: Var,
    ) -> Result<(Var, Var)> {
        let warped = tape.add(pv, sf)?;
        let (wt, qt) = (tape.value(warped).clone(), tape.value(qv).clone());
        let k_t = self.config.k.min(qt.rows());
        let idx = knn(&wt, &qt, k_t)?;
        let fe = self.enhance_src[level - 1].forward(tape, p, warped, qv, Some(g), &idx, k_t)?;
        let fe = tape.add(f, fe)?;
        let k_s = self.config.k.min(wt.rows());
        let idx = knn(&qt, &wt, k_s)?;
        let ge = self.enhance_tgt[level - 1].forward(tape, p, qv, warped, Some(f), &idx, k_s)?;
        let ge = tape.add(g, ge)?;
        Ok((fe, ge))
    }

    /// Forward pass on a fresh tape, returning the final flow.
    pub fn predict(&self, source: &Tensor, target: &Tensor, iters: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward_with_iters(&mut tape, &p, source, target, iters)?;
        Ok(tape.value(out.flow).clone())
    }

    /// Flow for every source point after each finest-level iteration.
    pub fn predict_iterations(&self, source: &Tensor, target: &Tensor, iters: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward_with_iters(&mut tape, &p, source, target, iters)?;
        let finest = &out.levels[0];
        let dense = finest.input_indices.len() == source.rows();
        let k = self.config.upsample_k.min(out.finest_coords.rows());
        finest
            .flows
            .iter()
            .map(|&v| {
                if dense {
                    Ok(tape.value(v).clone())
                } else {
                    let up = upsample(&mut tape, &out.finest_coords, source, v, k)?;
                    Ok(tape.value(up).clone())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::scene::{generate_scene, SceneSpec};

    #[test]
    fn single_level_single_iteration_is_one_isu_call() {
        let config = NetworkConfig {
            levels: 1,
            iters: 1,
            points: alloc::vec![64],
            channels: 8,
            motion_channels: 8,
            k: 4,
            state: 4,
            zero_flow_head: false,
            zero_output_proj: false,
            ..NetworkConfig::default()
        };
        let model = FlowMambaModel::new(config).unwrap();
        let sc = generate_scene(&SceneSpec::default(), 3).unwrap();
        let rows: Vec<usize> = (0..40).collect();
        let (s, t) = (sc.source.gather_rows(&rows), sc.target.gather_rows(&rows));

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &s, &t).unwrap();
        let got = tape.value(out.flow).clone();

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let enc = |tape: &mut Tape, conv: &SetConv, x: &Tensor| {
            let nbr = knn(x, x, 4).unwrap();
            let c = tape.constant(x.clone());
            conv.forward(tape, &p, c, c, None, &nbr, 4).unwrap()
        };
        let f = enc(&mut tape, &model.feature_enc[0], &s);
        let g = enc(&mut tape, &model.feature_enc[0], &t);
        let cf = enc(&mut tape, &model.context_enc[0], &s);
        let inputs = LevelInputs {
            p: tape.constant(s.clone()),
            q: tape.constant(t.clone()),
            f,
            g,
            cf,
            sf0: tape.constant(Tensor::zeros(&[40, 3])),
            h0: tape.activation(cf, Activation::Tanh),
        };
        let manual = isu_iterate(&mut tape, &p, &model.isu[0], inputs, 1).unwrap();
        assert_eq!(&got, tape.value(manual.sf));
        assert!(got.max_abs() > 0.0);
    }
}
