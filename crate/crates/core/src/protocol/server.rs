use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::eval::RoundMetrics;
use crate::lora::{AdapterSet, LoraAdapter};
use crate::quantizer::format::{self, dense_len};
use crate::quantizer::{build_standard_set, quantize, QuantizedTensor, StandardNumberSet};
use crate::tensor::Matrix;

/// Codebook width, or `Off` to broadcast adapters verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BitWidth {
    Bits(u8),
    Off,
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitWidth::Bits(w) => write!(f, "{w}"),
            BitWidth::Off => f.write_str("off"),
        }
    }
}

impl FromStr for BitWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("off") {
            return Ok(BitWidth::Off);
        }
        s.parse::<u8>()
            .map(BitWidth::Bits)
            .map_err(|_| Error::Config(format!("bits must be a width or \"off\", got {s:?}")))
    }
}

impl Serialize for BitWidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BitWidth::Bits(w) => s.serialize_u8(*w),
            BitWidth::Off => s.serialize_str("off"),
        }
    }
}

impl<'de> Deserialize<'de> for BitWidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(u8),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(w) => Ok(BitWidth::Bits(w)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How the server encodes adapters before they leave it.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantization {
    Enabled {
        codebook: StandardNumberSet,
        block_size: usize,
    },
    /// Plain federated averaging: adapters are sent in full precision.
    Disabled,
}

impl Quantization {
    pub fn new(bits: BitWidth, block_size: usize) -> Result<Self> {
        match bits {
            BitWidth::Off => Ok(Quantization::Disabled),
            BitWidth::Bits(w) => {
                if block_size == 0 {
                    return Err(Error::Config("block size must be positive".into()));
                }
                Ok(Quantization::Enabled {
                    codebook: build_standard_set(w)?,
                    block_size,
                })
            }
        }
    }

    pub fn is_enabled(&self) -> bool {
        matches!(self, Quantization::Enabled { .. })
    }
}

/// One matrix as it travels to clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Quantized(QuantizedTensor),
    Dense(Matrix),
}

impl Payload {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::Quantized(q) => format::serialize(q),
            Payload::Dense(m) => format::serialize_dense(m),
        }
    }

    /// Parses either wire format, dispatching on the magic bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(&format::DENSE_MAGIC) {
            format::deserialize_dense(bytes).map(Payload::Dense)
        } else {
            format::deserialize(bytes).map(Payload::Quantized)
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            Payload::Quantized(q) => q.dequantize(),
            Payload::Dense(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Payload::Quantized(q) => q.shape(),
            Payload::Dense(m) => m.shape(),
        }
    }

    /// Encoded length without encoding.
    pub fn encoded_len(&self) -> usize {
        match self {
            Payload::Quantized(q) => {
                format::quantized_len(q.rows(), q.cols(), q.block_size(), q.codebook().len())
            }
            Payload::Dense(m) => dense_len(m.rows(), m.cols()),
        }
    }
}

/// Everything the server sends in one round: a `(B, A)` payload pair per
/// adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    layers: Vec<Option<(Payload, Payload)>>,
}

impl Broadcast {
    pub fn layers(&self) -> &[Option<(Payload, Payload)>] {
        &self.layers
    }

    pub fn payloads(&self) -> impl Iterator<Item = &Payload> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|(b, a)| [b, a])
    }

    /// What a client reconstructs: the proxy adapters.
    pub fn proxies(&self) -> AdapterSet {
        AdapterSet::new(
            self.layers
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|(b, a)| {
                        LoraAdapter::new(b.to_matrix(), a.to_matrix())
                            .expect("payload shapes come from valid adapters")
                    })
                })
                .collect(),
        )
    }

    /// Serialized payloads, `B` then `A` per adapted layer.
    pub fn encode(&self) -> Vec<Vec<u8>> {
        self.payloads().map(Payload::encode).collect()
    }

    pub fn byte_len(&self) -> usize {
        self.payloads().map(Payload::encoded_len).sum()
    }
}

/// The server's private state.
#[derive(Debug, Clone)]
pub struct ServerState {
    round: usize,
    adapters: AdapterSet,
    quantization: Quantization,
    history: Vec<RoundMetrics>,
}

impl ServerState {
    pub fn new(adapters: AdapterSet, quantization: Quantization) -> Result<Self> {
        if !adapters.is_finite() {
            return Err(Error::NonFinite("initial adapters".into()));
        }
        Ok(Self {
            round: 0,
            adapters,
            quantization,
            history: Vec::new(),
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// The full-precision global adapters. Never sent to clients.
    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn quantization(&self) -> &Quantization {
        &self.quantization
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub(crate) fn record(&mut self, metrics: RoundMetrics) {
        self.history.push(metrics);
    }

    pub(crate) fn advance(&mut self, adapters: AdapterSet) {
        self.adapters = adapters;
        self.round += 1;
    }

    /// Encodes every global `B` and `A` independently with the configured
    /// codebook and block size.
    pub fn broadcast(&self) -> Result<Broadcast> {
        let encode = |m: &Matrix| -> Result<Payload> {
            match &self.quantization {
                Quantization::Enabled {
                    codebook,
                    block_size,
                } => Ok(Payload::Quantized(quantize(m, codebook, *block_size)?)),
                Quantization::Disabled => Ok(Payload::Dense(m.clone())),
            }
        };
        let layers = self
            .adapters
            .slots()
            .iter()
            .map(|slot| {
                slot.as_ref()
                    .map(|ad| Ok((encode(ad.b())?, encode(ad.a())?)))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Broadcast { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn adapters(seed: u64) -> AdapterSet {
        let mut rng = RandomSource::new(seed, "server-test");
        AdapterSet::new(vec![
            Some(LoraAdapter::init(6, 5, 2, &mut rng).unwrap()),
            None,
            Some(LoraAdapter::init(3, 6, 2, &mut rng).unwrap()),
        ])
    }

    #[test]
    fn bit_width_parsing() {
        assert_eq!("off".parse::<BitWidth>().unwrap(), BitWidth::Off);
        assert_eq!("2".parse::<BitWidth>().unwrap(), BitWidth::Bits(2));
        assert!("two".parse::<BitWidth>().is_err());
        let json: Vec<BitWidth> = serde_json::from_str(r#"[1, "off", 3]"#).unwrap();
        assert_eq!(json, [BitWidth::Bits(1), BitWidth::Off, BitWidth::Bits(3)]);
        assert_eq!(serde_json::to_string(&json).unwrap(), r#"[1,"off",3]"#);
    }

    #[test]
    fn initial_broadcast_hits_zero_blocks() {
        let q = Quantization::new(BitWidth::Bits(2), 256).unwrap();
        let server = ServerState::new(adapters(1), q).unwrap();
        let bc = server.broadcast().unwrap();
        for (b, _) in bc.layers().iter().flatten() {
            match b {
                Payload::Quantized(q) => assert!(q.scales().iter().all(|&z| z == 0.0)),
                Payload::Dense(_) => panic!("expected quantized payload"),
            }
        }
        let proxies = bc.proxies();
        for ((_, p), (_, g)) in proxies.iter().zip(server.adapters().iter()) {
            assert_eq!(p.b(), g.b());
        }
    }

    #[test]
    fn disabled_quantization_is_identity() {
        let server = ServerState::new(adapters(2), Quantization::Disabled).unwrap();
        let bc = server.broadcast().unwrap();
        assert_eq!(&bc.proxies(), server.adapters());
        for bytes in bc.encode() {
            assert_eq!(&bytes[..4], b"FLPF");
        }
    }

    #[test]
    fn encoded_lengths_match_format() {
        let q = Quantization::new(BitWidth::Bits(3), 16).unwrap();
        let server = ServerState::new(adapters(3), q).unwrap();
        let bc = server.broadcast().unwrap();
        let encoded = bc.encode();
        assert_eq!(encoded.len(), 4);
        let total: usize = encoded.iter().map(Vec::len).sum();
        assert_eq!(total, bc.byte_len());
        // B 6x2 and A 2x5, then B 3x2 and A 2x6, 8 codebook values.
        let expected = format::quantized_len(6, 2, 16, 8)
            + format::quantized_len(2, 5, 16, 8)
            + format::quantized_len(3, 2, 16, 8)
            + format::quantized_len(2, 6, 16, 8);
        assert_eq!(total, expected);
        for bytes in &encoded {
            assert_eq!(Payload::decode(bytes).unwrap().encode(), *bytes);
        }
    }
}
