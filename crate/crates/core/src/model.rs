//! Encoder plus one or two decoding branches, wired per training variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::data::bitmap::Bitmap;
use crate::data::vocab::TokenId;
use crate::decoder::{Branch, BranchOutput, Decoded, Direction};
use crate::encoder::{Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::objective::{single_loss, total_loss, Loss, LossBreakdown};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tape, Tensor};

/// Name, direction and initializer of each branch of a variant, in
/// registration order. The first entry is the branch used for inference.
pub fn branch_layout(variant: Variant) -> Vec<(&'static str, Direction, Init)> {
    let l2r = ("l2r", Direction::L2R, Init::GlorotUniform);
    match variant {
        Variant::UniL2R => vec![l2r],
        Variant::UniR2L => vec![("r2l", Direction::R2L, Init::HeNormal)],
        Variant::Aum => vec![l2r, ("l2r2", Direction::L2R, Init::HeNormal)],
        Variant::Abm => vec![l2r, ("r2l", Direction::R2L, Init::HeNormal)],
    }
}

/// Loss hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub lambda: f64,
    pub temperature: f64,
    pub detach_target: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            lambda: 0.5,
            temperature: 2.0,
            detach_target: false,
        }
    }
}

/// Loss and dense per-parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleGradients<T> {
    pub breakdown: LossBreakdown<T>,
    /// Indexed by [`ParamId::index`]; zero for parameters the loss ignores.
    pub grads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub branches: Vec<Branch>,
}

impl<T: Scalar> Model<T> {
    /// Initializes every parameter from `seed`: encoder first, then the
    /// branches in [`branch_layout`] order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, "encoder", &mut rng)?;
        let mut branches = Vec::new();
        for (name, direction, init) in branch_layout(config.variant) {
            branches.push(Branch::new(
                name,
                direction,
                config.decoder.clone(),
                config.encoder.out_channels,
                &mut store,
                init,
                &mut rng,
            )?);
        }
        Ok(Model {
            config,
            store,
            encoder,
            branches,
        })
    }

    pub fn branch(&self, name: &str) -> Result<&Branch> {
        self.branches.iter().find(|b| b.name == name).ok_or_else(|| {
            let have: Vec<&str> = self.branches.iter().map(|b| b.name.as_str()).collect();
            Error::Capability(format!("branch {name:?} is not in this model (has {have:?})"))
        })
    }

    /// The branch used for inference.
    pub fn primary(&self) -> &Branch {
        &self.branches[0]
    }

    pub fn branch_names(&self) -> Vec<String> {
        self.branches.iter().map(|b| b.name.clone()).collect()
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    /// Keeps only the encoder and the inference branch.
    pub fn into_inference(mut self) -> Self {
        let keep = self.encoder.param_ids().len() + self.branches[0].param_ids().len();
        self.store.truncate(keep);
        self.branches.truncate(1);
        self
    }

    /// Sets every parameter of a branch to zero.
    pub fn zero_branch(&mut self, name: &str) -> Result<()> {
        let ids = self.branch(name)?.param_ids();
        for id in ids {
            self.store.tensor_mut(id).fill(T::zero());
        }
        Ok(())
    }

    /// Encodes an image; `mask` defaults to all pixels valid.
    pub fn encode(&self, tape: &mut Tape<T>, image: &Bitmap, mask: Option<&Bitmap>) -> Result<FeatureMap<T>> {
        self.encode_with(&self.store, tape, image, mask)
    }

    fn encode_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: &Bitmap,
        mask: Option<&Bitmap>,
    ) -> Result<FeatureMap<T>> {
        let img = image.to_tensor::<T>();
        let m = match mask {
            Some(m) => m.to_tensor::<T>(),
            None => Tensor::full(&[image.height, image.width], T::one()),
        };
        self.encoder.encode(tape, store, &img, &m)
    }

    /// Teacher-forced outputs of every branch.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<T>,
        fmap: &FeatureMap<T>,
        target: &[TokenId],
    ) -> Result<Vec<BranchOutput>> {
        self.branches
            .iter()
            .map(|b| b.decode_teacher_forced(tape, &self.store, fmap, target))
            .collect()
    }

    /// Training objective of the configured variant for one sample.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        image: &Bitmap,
        mask: Option<&Bitmap>,
        target: &[TokenId],
        objective: &ObjectiveSettings,
    ) -> Result<Loss<T>> {
        self.loss_with(&self.store, tape, image, mask, target, objective)
    }

    /// [`Model::loss`] evaluated with substitute parameter values, which must
    /// share this model's layout.
    pub fn loss_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: &Bitmap,
        mask: Option<&Bitmap>,
        target: &[TokenId],
        objective: &ObjectiveSettings,
    ) -> Result<Loss<T>> {
        let fmap = self.encode_with(store, tape, image, mask)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.decode_teacher_forced(tape, store, &fmap, target))
            .collect::<Result<Vec<_>>>()?;
        match outs.as_slice() {
            [only] => single_loss(tape, only, target, objective.temperature),
            [first, second] => total_loss(
                tape,
                first,
                second,
                target,
                objective.lambda,
                objective.temperature,
                objective.detach_target,
            ),
            _ => Err(Error::Config("a model has one or two branches".into())),
        }
    }

    /// Loss and gradients of one sample on a fresh tape.
    pub fn sample_gradients(
        &self,
        image: &Bitmap,
        mask: Option<&Bitmap>,
        target: &[TokenId],
        objective: &ObjectiveSettings,
    ) -> Result<SampleGradients<T>> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, image, mask, target, objective)?;
        let grads = tape.backward(loss.var)?;
        let grads = self.store.ids().map(|id| grads.param_or_zero(&self.store, id)).collect();
        Ok(SampleGradients {
            breakdown: loss.breakdown,
            grads,
        })
    }

    /// Free-running decoding with the named branch (the inference branch when
    /// `branch` is `None`). `beam` of `None` or `Some(1)` decodes greedily.
    pub fn recognize(&self, image: &Bitmap, branch: Option<&str>, beam: Option<usize>, max_len: usize) -> Result<Decoded> {
        let b = match branch {
            Some(name) => self.branch(name)?,
            None => self.primary(),
        };
        let mut tape = Tape::inference();
        let fmap = self.encode(&mut tape, image, None)?;
        match beam {
            None => b.decode_greedy(&mut tape, &self.store, &fmap, max_len),
            Some(w) => b.decode_beam(&mut tape, &self.store, &fmap, w, max_len),
        }
    }
}

impl Model<f64> {
    /// Compares the backward pass of the full training loss on one sample
    /// against central differences, tensor by tensor.
    pub fn gradient_check(
        &self,
        image: &Bitmap,
        target: &[TokenId],
        objective: &ObjectiveSettings,
        options: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        grad_check(
            &self.store,
            |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
                Ok(self.loss_with(store, tape, image, None, target, objective)?.var)
            },
            options,
        )
    }
}

/// A tiny double-precision model, input and target for end-to-end gradient
/// checks. Every parameter is nudged by uniform noise in ±0.1 and the image is
/// a smooth texture, so no ReLU or maxout input sits exactly on its kink
/// (zero-initialized offsets would put many of them there).
pub fn gradient_check_case(variant: Variant, seed: u64) -> Result<(Model<f64>, Bitmap, Vec<TokenId>)> {
    let mut config = ModelConfig::tiny(8);
    config.variant = variant;
    let mut model = Model::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a69_7474);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.tensor_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut image = Bitmap::new(12, 12);
    for i in 0..12 {
        for j in 0..12 {
            let (y, x) = (i as f32, j as f32);
            image.set(i, j, 0.5 + 0.3 * (1.3 * y + 0.7 * x).sin() + 0.15 * (0.4 * y * x).cos());
        }
    }
    Ok((model, image, vec![3, 4, 5]))
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn tiny(variant: Variant) -> Model<f64> {
        let mut c = ModelConfig::tiny(8);
        c.variant = variant;
        Model::new(c, 3).unwrap()
    }

    fn image() -> Bitmap {
        let mut b = Bitmap::new(12, 12);
        for i in 2..10 {
            b.set(i, i, 1.0);
            b.set(i, 11 - i, 0.7);
        }
        b
    }

    #[test]
    fn variants_register_expected_branches() {
        assert_eq!(tiny(Variant::UniL2R).branch_names(), ["l2r"]);
        assert_eq!(tiny(Variant::UniR2L).branch_names(), ["r2l"]);
        assert_eq!(tiny(Variant::Aum).branch_names(), ["l2r", "l2r2"]);
        assert_eq!(tiny(Variant::Abm).branch_names(), ["l2r", "r2l"]);
        assert!(matches!(tiny(Variant::UniL2R).branch("r2l"), Err(Error::Capability(_))));
    }

    #[test]
    fn branches_are_parameter_independent_and_sized_alike() {
        let m = tiny(Variant::Abm);
        let a = m.store.scalar_count_with_prefix("l2r.");
        let b = m.store.scalar_count_with_prefix("r2l.");
        assert_eq!(a, b);
        let enc = m.store.scalar_count_with_prefix("encoder.");
        assert_eq!(enc + a + b, m.store.scalar_count());
    }

    #[test]
    fn inference_model_drops_second_branch() {
        let m = tiny(Variant::Abm);
        let full = m.recognize(&image(), None, None, 6).unwrap();
        let inf = m.into_inference();
        assert!(inf.store.iter().all(|(_, n, _)| !n.starts_with("r2l.")));
        assert_eq!(inf.recognize(&image(), None, None, 6).unwrap(), full);
    }

    #[test]
    fn uni_l2r_shares_initial_draws_with_abm() {
        let uni = tiny(Variant::UniL2R);
        let abm = tiny(Variant::Abm);
        for (id, name, t) in uni.store.iter() {
            assert_eq!(abm.store.name(id), name);
            assert_eq!(abm.store.tensor(id), t);
        }
    }

    #[test]
    fn loss_and_gradients_are_finite() {
        let m = tiny(Variant::Abm);
        let g = m
            .sample_gradients(&image(), None, &[3, 4, 5], &ObjectiveSettings::default())
            .unwrap();
        assert!(g.breakdown.total.is_finite() && g.breakdown.kl >= 0.0);
        assert_eq!(g.grads.len(), m.store.len());
        assert!(g.grads.iter().all(Tensor::all_finite));
    }

    #[test]
    fn desk_model_builds_from_default_train_config() {
        let c = TrainConfig::default().model(30);
        let m = Model::<f32>::new(c, 0).unwrap();
        assert_eq!(m.branches.len(), 2);
    }
}
