//! Named configurations of the published model sizes plus a tiny test model.

use super::{HeadKind, NetworkConfig};

pub fn segmentation(width: usize) -> NetworkConfig {
    NetworkConfig {
        width,
        head: HeadKind::V2,
        out_dim: 19,
        input_size: (1024, 2048),
        ..NetworkConfig::default()
    }
}

/// 98 landmarks at 256x256.
pub fn w18_landmarks() -> NetworkConfig {
    NetworkConfig {
        width: 18,
        head: HeadKind::V2,
        out_dim: 98,
        input_size: (256, 256),
        ..NetworkConfig::default()
    }
}

pub fn classification(width: usize, head: HeadKind) -> NetworkConfig {
    NetworkConfig {
        width,
        head,
        out_dim: 1000,
        input_size: (224, 224),
        ..NetworkConfig::default()
    }
}

pub fn pyramid(width: usize) -> NetworkConfig {
    NetworkConfig {
        width,
        head: HeadKind::V2p,
        out_dim: 256,
        input_size: (256, 256),
        ..NetworkConfig::default()
    }
}

/// C=4 at 32x32 with one unit everywhere; cheap enough for finite differences.
pub fn tiny() -> NetworkConfig {
    NetworkConfig {
        width: 4,
        stage_blocks: [1, 1, 1],
        units_per_branch: 1,
        stage1_units: 1,
        stage1_bottleneck_width: 8,
        stem_width: 16,
        head: HeadKind::V2,
        out_dim: 2,
        input_size: (32, 32),
        ..NetworkConfig::default()
    }
}

pub const NAMES: [&str; 11] = [
    "w48seg", "w40seg", "w18seg", "w18lm", "w18cls", "w30cls", "w40cls", "w27ci", "w25cii", "w18v2p", "tiny",
];

pub fn by_name(name: &str) -> Option<NetworkConfig> {
    Some(match name {
        "w48seg" => segmentation(48),
        "w40seg" => segmentation(40),
        "w18seg" => segmentation(18),
        "w18lm" => w18_landmarks(),
        "w18cls" => classification(18, HeadKind::ClsC),
        "w30cls" => classification(30, HeadKind::ClsC),
        "w40cls" => classification(40, HeadKind::ClsC),
        "w27ci" => classification(27, HeadKind::ClsCi),
        "w25cii" => classification(25, HeadKind::ClsCii),
        "w18v2p" => pyramid(18),
        "tiny" => tiny(),
        _ => return None,
    })
}
