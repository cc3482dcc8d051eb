#![allow(dead_code)]

use std::sync::Arc;

use infohub_gateway::{Hub, HubConfig};

pub const POSTER: &str = "This research studies how a plush robot can explain posters. \
The robot listens to the presenter and stores short notes. \
Visitors ask questions and the robot answers from those notes. \
What is special about this research is that knowledge is taught by voice.";

/// Config with everything in memory and ephemeral ports.
pub fn memory_config() -> HubConfig {
    HubConfig {
        data_dir: String::new(),
        http_bind: "127.0.0.1:0".into(),
        agent_bind: "127.0.0.1:0".into(),
        sync_bind: "127.0.0.1:0".into(),
        ..HubConfig::default()
    }
}

pub fn memory_hub() -> Arc<Hub> {
    Hub::open(memory_config()).unwrap()
}
