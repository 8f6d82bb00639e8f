use std::collections::BTreeMap;

use pfbdiff::image_io::{self, Raster};
use pfbdiff::weights_file;
use pfbdiff_core::Tensor;
use proptest::prelude::*;

fn rasters() -> impl Strategy<Value = Raster> {
    (prop_oneof![Just(1usize), Just(3usize)], 1usize..12, 1usize..12).prop_flat_map(|(channels, width, height)| {
        proptest::collection::vec(any::<u8>(), channels * width * height)
            .prop_map(move |pixels| Raster { channels, width, height, pixels })
    })
}

fn tensor_maps() -> impl Strategy<Value = BTreeMap<String, Tensor>> {
    let tensor = proptest::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| Tensor::new(&shape, data).unwrap())
    });
    proptest::collection::btree_map("[a-z][a-z0-9.]{0,12}", tensor, 0..6)
}

proptest! {
    #[test]
    fn netpbm_round_trips(r in rasters()) {
        let bytes = image_io::encode(&r);
        prop_assert_eq!(image_io::decode(&bytes).unwrap(), r);
    }

    #[test]
    fn colour_images_survive_the_real_mapping(r in rasters().prop_filter("colour", |r| r.channels == 3)) {
        let bytes = image_io::encode(&r);
        let t = image_io::decode_image(&bytes).unwrap();
        prop_assert_eq!(image_io::encode_image(&t).unwrap(), bytes);
    }

    #[test]
    fn masks_round_trip(bits in proptest::collection::vec(0u8..2, 1..100), w in 1usize..10) {
        let h = bits.len().div_ceil(w);
        let m = Tensor::from_fn(&[h, w], |i| f32::from(bits.get(i).copied().unwrap_or(0)));
        let back = image_io::decode_mask(&image_io::encode_mask(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn image_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = image_io::decode(&bytes);
        let mut framed = b"P6\n2 2\n255\n".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = image_io::decode(&framed);
    }

    #[test]
    fn weights_round_trip_bit_exact(map in tensor_maps()) {
        let bytes = weights_file::encode(&map).unwrap();
        let back = weights_file::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), map.len());
        for (name, t) in &map {
            let b = &back[name];
            prop_assert_eq!(b.shape(), t.shape());
            prop_assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn weights_decoder_refuses_garbage(map in tensor_maps(), cut in any::<prop::sample::Index>(), flip in any::<u8>()) {
        let bytes = weights_file::encode(&map).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(weights_file::decode(&bytes[..n]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= flip | 1;
        prop_assert!(weights_file::decode(&bad).is_err());
        let mut bad_version = bytes;
        bad_version[4] = bad_version[4].wrapping_add(1);
        prop_assert!(weights_file::decode(&bad_version).is_err());
    }
}
