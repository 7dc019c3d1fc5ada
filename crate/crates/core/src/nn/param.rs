use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which elements of a parameter tensor receive optimizer updates.
///
/// `Channels` flags are indexed by output channel; the parameter's leading
/// axis is the output-channel axis, so each flag covers one contiguous block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainability {
    All,
    Frozen,
    Channels(Vec<bool>),
}

#[derive(Debug, Clone)]
pub(crate) struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// A learnable tensor with its gradient, Adam moments and update mask.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub(crate) moments: Option<Moments<T>>,
    trainability: Trainability,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            moments: None,
            trainability: Trainability::All,
        }
    }

    /// Allocates zeroed Adam moments if absent.
    pub fn init_moments(&mut self) {
        if self.moments.is_none() {
            let n = self.value.len();
            self.moments = Some(Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
        }
    }

    pub fn has_moments(&self) -> bool {
        self.moments.is_some()
    }

    /// First and second moment estimates, if initialized.
    pub fn moments(&self) -> Option<(&[T], &[T])> {
        self.moments.as_ref().map(|m| (&m.m[..], &m.v[..]))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Number of output channels the leading axis represents.
    pub fn channels(&self) -> usize {
        self.value.shape()[0]
    }

    pub fn trainability(&self) -> &Trainability {
        &self.trainability
    }

    pub fn set_trainability(&mut self, t: Trainability) -> Result<()> {
        if let Trainability::Channels(flags) = &t {
            if flags.len() != self.channels() {
                return Err(Error::Config(format!(
                    "mask has {} channel flags, parameter has {} output channels",
                    flags.len(),
                    self.channels()
                )));
            }
        }
        self.trainability = t;
        Ok(())
    }

    /// Elements per output channel.
    pub fn block(&self) -> usize {
        self.value.len() / self.channels()
    }

    pub fn is_trainable(&self, element: usize) -> bool {
        match &self.trainability {
            Trainability::All => true,
            Trainability::Frozen => false,
            Trainability::Channels(flags) => flags[element / self.block()],
        }
    }

    pub fn trainable_count(&self) -> usize {
        match &self.trainability {
            Trainability::All => self.value.len(),
            Trainability::Frozen => 0,
            Trainability::Channels(flags) => flags.iter().filter(|&&f| f).count() * self.block(),
        }
    }
}
