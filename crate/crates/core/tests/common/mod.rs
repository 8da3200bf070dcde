#![allow(dead_code)]

use packetlm::{FieldDescriptor, ModelConfig, ModelParams, PacketCodec, PacketSchema, Scalar, TokenizedPacket};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Integer-field schema with the given digit widths and class count.
pub fn schema(widths: &[usize], classes: usize, slack: usize) -> PacketSchema {
    let fields = widths.iter().enumerate().map(|(i, &w)| FieldDescriptor::integer(&format!("f{i}"), w)).collect();
    let worst = widths.iter().sum::<usize>() + widths.len() + 1;
    let m = *widths.iter().max().unwrap();
    PacketSchema::new(fields, (0..classes).map(|c| format!("c{c}")).collect(), worst + slack, m).unwrap()
}

/// A random labelled packet for `codec`.
pub fn random_packet(codec: &PacketCodec, rng: &mut ChaCha8Rng) -> TokenizedPacket {
    let fields: Vec<String> = codec
        .schema
        .fields
        .iter()
        .map(|f| {
            let len = rng.random_range(1..=f.max_digits);
            let hi = 10u64.pow(len as u32);
            rng.random_range(hi / 10..hi).to_string()
        })
        .collect();
    codec.encode(&fields, rng.random_range(0..codec.schema.class_count())).unwrap()
}

/// Initialized parameters with every entry perturbed by N(0, std²)-ish noise,
/// so gains and weights are all far from their init values.
pub fn noisy_params<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams<T> {
    let mut p = ModelParams::<T>::init(cfg, rng);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += T::of(rng.random_range(-scale..scale));
        }
    }
    p
}
