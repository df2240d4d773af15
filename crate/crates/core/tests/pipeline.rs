//! Library-level pipeline properties across modules.

use proptest::prelude::*;
use qpf::codec::{compress_image, decompress_image, reconstruct_in_process};
use qpf::coder::Bitstream;
use qpf::synthetic::noise_image;
use qpf::{Checkpoint, Codec, CodecError, ModelConfig};

fn codec() -> Codec {
    let cfg = ModelConfig {
        tile_size: 64,
        num_queries: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        ..ModelConfig::toy()
    };
    Codec::new(cfg, 21).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stream_round_trip_matches_in_process(h in 64usize..200, w in 64usize..200, seed in any::<u64>(), side in any::<bool>()) {
        let c = codec();
        let img = noise_image(h, w, seed);
        let (bs, stats) = compress_image(&img, &c, side).unwrap();
        let bytes = bs.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), stats.file_bytes);
        let back = decompress_image(&Bitstream::from_bytes(&bytes).unwrap(), &c).unwrap();
        prop_assert_eq!(back, reconstruct_in_process(&img, &c).unwrap());
    }

    #[test]
    fn corrupted_streams_never_panic(seed in any::<u64>(), flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..6)) {
        let c = codec();
        let (bs, _) = compress_image(&noise_image(130, 70, seed), &c, false).unwrap();
        let mut bytes = bs.to_bytes().unwrap();
        for (pos, v) in flips {
            let i = pos % bytes.len();
            bytes[i] ^= v | 1;
        }
        if let Ok(parsed) = Bitstream::from_bytes(&bytes) {
            let _ = decompress_image(&parsed, &c);
        }
    }
}

#[test]
fn checkpoint_reload_decodes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = codec();
    let path = dir.path().join("m.qpck");
    Checkpoint::new(c.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().codec;
    assert_eq!(loaded.digest(), c.digest());
    let img = noise_image(128, 64, 4);
    let (bs, _) = compress_image(&img, &c, false).unwrap();
    assert_eq!(decompress_image(&bs, &loaded).unwrap(), reconstruct_in_process(&img, &c).unwrap());
}

#[test]
fn geometry_mismatch_is_a_format_error() {
    let c = codec();
    let (mut bs, _) = compress_image(&noise_image(64, 64, 1), &c, false).unwrap();
    bs.header.channels += 1;
    let err = decompress_image(&bs, &c).unwrap_err();
    assert!(matches!(err, CodecError::Format(_)), "{err}");
}
