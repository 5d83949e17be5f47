//! Adam for the generator side, RMSprop for the discriminators, and the
//! step-decay learning-rate schedule of the generator.

use serde::{Deserialize, Serialize};

use super::model::{Discriminators, Generator, ParamBlock};
use super::NnError;

fn check_shapes<P: ParamBlock + ?Sized, G: ParamBlock + ?Sized>(
    params: &mut P,
    grads: &G,
    state_len: usize,
) -> Result<(), NnError> {
    let p: Vec<usize> = params.tensors_mut().iter().map(|t| t.len()).collect();
    let g: Vec<usize> = grads.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = p.iter().sum();
    if p != g || total != state_len {
        return Err(NnError::ShapeMismatch(format!(
            "params {total}, gradients {}, optimizer state {state_len}",
            g.iter().sum::<usize>()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn step<P: ParamBlock + ?Sized, G: ParamBlock + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
        lr: f64,
    ) -> Result<(), NnError> {
        check_shapes(params, grads, self.first_moment.len())?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for (p, (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (theta, &grad) in p.iter_mut().zip(g) {
                let m = &mut self.first_moment[k];
                let v = &mut self.second_moment[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
                *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub step: u64,
    pub square_avg: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize) -> Self {
        Self {
            decay: 0.99,
            eps: 1e-8,
            step: 0,
            square_avg: vec![0.0; len],
        }
    }

    pub fn step<P: ParamBlock + ?Sized, G: ParamBlock + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
        lr: f64,
    ) -> Result<(), NnError> {
        check_shapes(params, grads, self.square_avg.len())?;
        self.step += 1;
        let mut k = 0;
        for (p, (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (theta, &grad) in p.iter_mut().zip(g) {
                let v = &mut self.square_avg[k];
                *v = self.decay * *v + (1.0 - self.decay) * grad * grad;
                *theta -= lr * grad / (v.sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Generator learning rate: `base` decayed by `factor` after each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub factor: f64,
    /// 1-based epochs after which the rate decays.
    pub milestones: Vec<usize>,
}

impl StepSchedule {
    /// `1e-4`, ×0.1 after epochs 3 and 6 of an 8-epoch run. Runs shorter than 7
    /// epochs get proportionally earlier milestones.
    pub fn for_epochs(base: f64, epochs: usize) -> Self {
        let milestones = if epochs >= 7 {
            vec![3, 6]
        } else {
            let first = (3 * epochs / 8).max(1);
            let second = (6 * epochs / 8).max(first + 1);
            vec![first, second]
        };
        Self {
            base,
            factor: 0.1,
            milestones,
        }
    }

    /// Rate in effect during 1-based `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.base * self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub adam: Adam,
    pub rmsprop: RmsProp,
    pub generator_lr: StepSchedule,
    pub discriminator_lr: f64,
}

impl OptimizerState {
    pub fn new(generator: &Generator, discriminators: &Discriminators, generator_lr: StepSchedule, discriminator_lr: f64) -> Self {
        Self {
            adam: Adam::new(generator.len()),
            rmsprop: RmsProp::new(discriminators.len()),
            generator_lr,
            discriminator_lr,
        }
    }

    pub fn adam_step(&mut self, generator: &mut Generator, grads: &Generator, epoch: usize) -> Result<(), NnError> {
        let lr = self.generator_lr.rate(epoch);
        self.adam.step(generator, grads, lr)
    }

    /// Descends the discriminator loss (ascends the discriminator objective).
    pub fn rmsprop_step(&mut self, discriminators: &mut Discriminators, grads: &Discriminators) -> Result<(), NnError> {
        self.rmsprop.step(discriminators, grads, self.discriminator_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One scalar parameter.
    struct Scalar(Vec<f64>);

    impl ParamBlock for Scalar {
        fn tensors(&self) -> Vec<(String, &[f64])> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Scalar(vec![1.5, -2.0]);
        let g = Scalar(vec![0.0, 0.0]);
        let mut adam = Adam::new(2);
        adam.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
        assert_eq!(adam.step, 1);
        let mut rms = RmsProp::new(2);
        rms.square_avg = vec![4.0, 1.0];
        rms.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
        assert_eq!(rms.square_avg, vec![4.0 * 0.99, 0.99]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = Scalar(vec![0.0]);
        let g = Scalar(vec![0.37]);
        let mut adam = Adam::new(1);
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..200 {
            adam.step(&mut p, &g, lr).unwrap();
            let step = prev - p.0[0];
            assert!((step - lr).abs() < 1e-9 * lr.max(1.0) + 1e-10, "step {step}");
            prev = p.0[0];
        }
    }

    #[test]
    fn adam_three_step_hand_trace() {
        let grads = [0.5, -0.2, 0.1];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        let mut expected = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }
        // first step of Adam moves by exactly lr * sign(g) up to eps
        assert!((expected[0] - (1.0 - lr)).abs() < 1e-8);

        let mut p = Scalar(vec![1.0]);
        let mut adam = Adam::new(1);
        for (g, want) in grads.iter().zip(&expected) {
            adam.step(&mut p, &Scalar(vec![*g]), lr).unwrap();
            assert!((p.0[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsprop_hand_trace() {
        let mut p = Scalar(vec![0.0]);
        let mut rms = RmsProp::new(1);
        rms.step(&mut p, &Scalar(vec![2.0]), 0.1).unwrap();
        let v = 0.01 * 4.0f64;
        assert!((p.0[0] - (-0.1 * 2.0 / (v.sqrt() + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Scalar(vec![0.0, 1.0]);
        let mut adam = Adam::new(2);
        assert!(matches!(
            adam.step(&mut p, &Scalar(vec![1.0]), 0.1),
            Err(NnError::ShapeMismatch(_))
        ));
        let mut adam = Adam::new(3);
        assert!(adam.step(&mut p, &Scalar(vec![1.0, 1.0]), 0.1).is_err());
    }

    #[test]
    fn step_schedule_follows_milestones() {
        let s = StepSchedule::for_epochs(1e-4, 8);
        let rates: Vec<f64> = (1..=8).map(|e| s.rate(e)).collect();
        assert_eq!(rates[..3], [1e-4; 3]);
        assert!((rates[3] - 1e-5).abs() < 1e-20 && (rates[5] - 1e-5).abs() < 1e-20);
        assert!((rates[6] - 1e-6).abs() < 1e-21 && (rates[7] - 1e-6).abs() < 1e-21);
        assert_eq!(StepSchedule::for_epochs(1e-4, 4).milestones, vec![1, 3]);
        assert_eq!(StepSchedule::for_epochs(1e-4, 12).milestones, vec![3, 6]);
    }
}
