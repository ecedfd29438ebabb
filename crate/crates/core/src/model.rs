//! The full network: fusion stage, query decoder and heads over one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::grid::GridSpec;
use crate::heads::{emit, Heads, Predictions};
use crate::map::VectorMap;
use crate::pec::{Decoder, DescriptorState, Pec, SingleCross, Slots};
use crate::scene::SyntheticScene;
use crate::sgc::{ConcatFusion, Fusion, Sgc};
use crate::tensor::{Binding, ParamSet, Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamSet,
    pub fusion: Fusion,
    pub decoder: Decoder,
    pub heads: Heads,
}

#[derive(Clone, Copy, Debug)]
pub struct Output<'t> {
    pub fused: Var<'t>,
    pub descriptors: DescriptorState<'t>,
    pub predictions: Predictions<'t>,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Tensor,
    pub keypoints: Tensor,
    pub flow: Option<Tensor>,
}

impl Model {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let m = &config.model;
        let (h, w) = (config.grid.h, config.grid.w);
        let fusion = if config.ablation.sgc.is_on() {
            Fusion::Sgc(Sgc::new(&mut params, m.channels, m.flow_blocks, m.norm, &mut rng))
        } else {
            Fusion::Concat(ConcatFusion::new(&mut params, m.channels, m.norm, &mut rng))
        };
        let decoder = if config.ablation.pec.is_on() {
            Decoder::Pec(Pec::new(&mut params, m, h, w, &mut rng))
        } else {
            Decoder::Single(SingleCross::new(&mut params, m, h, w, &mut rng))
        };
        let heads = Heads::new(&mut params, m.channels, config.grid.range, &mut rng);
        Self { config: config.clone(), params, fusion, decoder, heads }
    }

    pub fn slots(&self) -> &Slots {
        &self.decoder.base().slots
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, cam: Var<'t>, lidar: Var<'t>) -> Result<Output<'t>> {
        let fused = self.fusion.forward(p, cam, lidar)?;
        let descriptors = self.decoder.forward(p, fused.grid)?;
        let predictions = Predictions {
            logits: self.heads.classify(p, descriptors.elements)?,
            keypoints: self.heads.keypoints(p, descriptors.points)?,
            masks: self.heads.masks(p, descriptors.elements, fused.grid)?,
            flow: fused.flow,
        };
        Ok(Output { fused: fused.grid, descriptors, predictions })
    }

    /// Forward pass with frozen parameters.
    pub fn infer(&self, scene: &SyntheticScene) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(scene.cam.features.clone()), tape.constant(scene.lidar.features.clone()))?;
        let pr = out.predictions;
        Ok(Inference {
            logits: (*pr.logits.value()).clone(),
            keypoints: (*pr.keypoints.value()).clone(),
            flow: pr.flow.map(|f| (*f.value()).clone()),
        })
    }

    pub fn predict(&self, scene: &SyntheticScene) -> Result<VectorMap> {
        let inf = self.infer(scene)?;
        Ok(emit(&scene.id, &inf.logits, &inf.keypoints, self.slots(), self.config.threshold))
    }
}
