//! Genome JSON: `{"agg": "add"|"hadamard", "edges": [6 codes 0-4], "ratio": 1|3|6}`.

use super::Genes;
use crate::artifacts::{from_json_bytes, to_canonical_json};
use crate::error::Result;

pub fn encode(genes: &Genes) -> Vec<u8> {
    to_canonical_json(genes)
        .expect("genes always serialize")
        .into_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<Genes> {
    from_json_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::genome::{CellGenome, IdSource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_random_genomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids = IdSource::new();
        for _ in 0..1000 {
            let g = CellGenome::random(&mut rng, &mut ids);
            assert_eq!(decode(&encode(&g.genes)).unwrap(), g.genes);
        }
    }

    #[test]
    fn canonical_text() {
        let text = String::from_utf8(encode(&Genes::INVERTED_RESIDUAL)).unwrap();
        let compact: String = text.split_whitespace().collect();
        assert_eq!(compact, r#"{"agg":"add","edges":[2,4,2,0,0,0],"ratio":6}"#);
    }

    #[test]
    fn unknown_operator_rejected() {
        let err = decode(br#"{"edges":[0,1,2,3,4,7],"ratio":1,"agg":"add"}"#).unwrap_err();
        assert!(matches!(&err, Error::Parse { .. }), "{err:?}");
        assert!(err.to_string().contains("unknown operator code 7"), "{err}");
    }

    #[test]
    fn missing_field_named() {
        let err = decode(br#"{"edges":[0,1,2,3,4,0],"ratio":1}"#).unwrap_err();
        assert!(err.to_string().contains("agg"), "{err}");
    }

    #[test]
    fn bad_ratio_and_arity() {
        assert!(decode(br#"{"edges":[0,1,2,3,4,0],"ratio":2,"agg":"add"}"#).is_err());
        assert!(decode(br#"{"edges":[0,1,2,3,4],"ratio":1,"agg":"add"}"#).is_err());
        assert!(decode(br#"{"edges":[0,1,2,3,4,0],"ratio":1,"agg":"max"}"#).is_err());
    }
}
