#![allow(dead_code)]

use filter_triage::finetune::MaskPlan;
use filter_triage::nn::{Layer, Trainability};
use filter_triage::Network32;
use sha2::{Digest, Sha256};

/// Hash of every frozen element and every frozen batch-norm statistic.
pub fn frozen_digest(net: &Network32, plan: &MaskPlan) -> Vec<u8> {
    let mut h = Sha256::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (name, p) in layer.params() {
            let t = plan.get(&format!("layers.{i}.{name}")).unwrap();
            let block = p.value.len() / p.value.shape()[0];
            for (k, v) in p.value.data().iter().enumerate() {
                let frozen = match t {
                    Trainability::All => false,
                    Trainability::Frozen => true,
                    Trainability::Channels(f) => !f[k / block],
                };
                if frozen {
                    h.update(k.to_le_bytes());
                    h.update(v.to_le_bytes());
                }
            }
        }
        if let Layer::BatchNorm(bn) = layer {
            if !plan.live_bn.contains(&i) {
                for v in bn.running_mean.iter().chain(&bn.running_var) {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize().to_vec()
}
