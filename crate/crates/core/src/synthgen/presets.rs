//! Built-in scenarios used by the acceptance suite and the CLI
//! (`scenario = "preset:<name>"`).
//!
//! The app catalog spreads apps over five categories with four actions
//! each. App identity is carried mostly by frame sizes, action identity
//! mostly by rates, direction mix and burstiness.

use super::{
    ActionProfile, AppProfile, Gaussian, Preference, Room, Scenario, SessionSchedule, UserScript,
};
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 5] = ["messaging", "social", "video", "music", "shopping"];
pub const ACTIONS_PER_CATEGORY: usize = 4;

/// (uplink fps, downlink fps, burstiness, uplink size shift, downlink size shift)
const ACTION_SHAPES: [(f64, f64, f64, f64, f64); ACTIONS_PER_CATEGORY] = [
    (2.0, 16.0, 0.5, 0.0, 16.0),
    (8.0, 8.0, 1.0, 6.0, -8.0),
    (13.0, 3.0, 0.6, 12.0, -16.0),
    (10.0, 20.0, 1.5, -6.0, 4.0),
];

pub fn app_name(i: usize) -> String {
    format!("com.synth.app{i:02}")
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Position of app `i` on the frame-size ladder. A stride coprime to `n`
/// interleaves the catalog so the last apps sit between earlier ones
/// instead of beyond them.
fn size_rank(i: usize, n: usize) -> usize {
    let stride = (3..).find(|s| gcd(*s, n) == 1).expect("a coprime stride exists");
    if n < stride {
        i
    } else {
        (i * stride) % n
    }
}

/// `n` apps; app `i` belongs to category `i % 5`.
pub fn app_catalog(n: usize) -> Vec<AppProfile> {
    (0..n)
        .map(|i| {
            let rank = size_rank(i, n) as f64;
            let down_base = 250.0 + 110.0 * rank;
            let up_base = 70.0 + 32.0 * rank;
            let actions = ACTION_SHAPES
                .iter()
                .enumerate()
                .map(|(j, &(up, down, burst, up_shift, down_shift))| ActionProfile {
                    action_id: j,
                    uplink_rate: up,
                    downlink_rate: down,
                    uplink_size: Gaussian::new(up_base + up_shift, 12.0),
                    downlink_size: Gaussian::new(down_base + down_shift, 35.0),
                    duration: Gaussian::new(12.0, 3.0),
                    burstiness: burst,
                })
                .collect();
            AppProfile {
                app_id: app_name(i),
                category: CATEGORIES[i % CATEGORIES.len()].to_string(),
                actions,
                background_rate: 0.05,
            }
        })
        .collect()
}

fn room(name: &str, last_octet: u8) -> Room {
    Room {
        name: name.to_string(),
        ap: crate::trace_model::MacAddr([0x02, 0xa0, 0x00, 0x00, 0x00, last_octet]),
        beacon_rate: 5.0,
        control_rate: 2.0,
    }
}

/// One label-recorder device visiting every app `instances` times in
/// single-app sessions, as in a controlled collection campaign.
pub fn app_campaign(seed: u64, n_apps: usize, instances: usize, session_length: f64) -> Scenario {
    let apps = app_catalog(n_apps);
    let w = 1.0 / (n_apps * ACTIONS_PER_CATEGORY) as f64;
    let preferences = apps
        .iter()
        .flat_map(|a| {
            a.actions.iter().map(move |act| Preference {
                app: a.app_id.clone(),
                action: act.action_id,
                weight: w,
            })
        })
        .collect();
    let gap = 20.0;
    let horizon = (n_apps * instances) as f64 * (session_length + gap) + gap;
    Scenario {
        seed,
        horizon,
        tap_interval: 0.5,
        overlap_prob: 0.0,
        rooms: vec![room("lab", 1)],
        apps,
        users: vec![UserScript {
            user_id: "recorder".into(),
            room: "lab".into(),
            preferences,
            schedule: SessionSchedule::Instances {
                per_app: instances,
                length: session_length,
                gap,
            },
            app_stickiness: 1.0,
            mac_rotation_period: None,
            label_recorder: true,
        }],
    }
}

/// Apps 0..8 are known, 8 and 9 are withheld for open-world evaluation.
pub fn closed_world(seed: u64) -> Scenario {
    app_campaign(seed, 10, 10, 60.0)
}

pub fn withheld_apps() -> Vec<String> {
    vec![app_name(8), app_name(9)]
}

/// Twelve users in three rooms (3, 4 and 5 users) with daily MAC rotation.
/// Each user has a distinct favourite app within the room, a secondary app
/// taken from the apps nobody in the room favours, and a personal skew over
/// actions.
pub fn office_users(seed: u64, days: usize, session_length: f64) -> Scenario {
    let apps = app_catalog(10);
    let known = 8;
    let rooms = vec![room("office1", 11), room("office2", 12), room("office3", 13)];
    let sizes = [3usize, 4, 5];
    let skew = [0.5, 0.3, 0.15, 0.05];
    let mut users = Vec::new();
    let mut uid = 1;
    for (ri, &n) in sizes.iter().enumerate() {
        let primaries: Vec<usize> = (0..n).map(|k| (k * 3 + ri) % known).collect();
        let spare: Vec<usize> = (0..known).filter(|a| !primaries.contains(a)).collect();
        for (k, &primary) in primaries.iter().enumerate() {
            let secondary = spare[k % spare.len()];
            let mut preferences = Vec::new();
            for (app, share) in [(primary, 0.9), (secondary, 0.1)] {
                for j in 0..ACTIONS_PER_CATEGORY {
                    preferences.push(Preference {
                        app: app_name(app),
                        action: j,
                        weight: share * skew[(j + k) % ACTIONS_PER_CATEGORY],
                    });
                }
            }
            users.push(UserScript {
                user_id: format!("user{uid:02}"),
                room: rooms[ri].name.clone(),
                preferences,
                schedule: SessionSchedule::Daily {
                    per_day: 1,
                    length: session_length,
                },
                app_stickiness: 0.5,
                mac_rotation_period: Some(86_400.0),
                label_recorder: false,
            });
            uid += 1;
        }
    }
    Scenario {
        seed,
        horizon: days as f64 * 86_400.0,
        tap_interval: 0.5,
        overlap_prob: 0.0,
        rooms,
        apps,
        users,
    }
}

/// Resolves `preset:<name>` scenario references.
pub fn by_name(name: &str, seed: u64) -> Result<Scenario> {
    match name {
        "closed_world" | "open_world" => Ok(closed_world(seed)),
        "office_users" => Ok(office_users(seed, 5, 480.0)),
        "office_small" => Ok(office_users(seed, 2, 120.0)),
        "tiny" => Ok(app_campaign(seed, 3, 2, 40.0)),
        other => Err(Error::Config(format!("unknown scenario preset {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        closed_world(1).validate().unwrap();
        office_users(1, 2, 120.0).validate().unwrap();
        let s = office_users(1, 1, 60.0);
        assert_eq!(s.users.len(), 12);
        for (room, n) in [("office1", 3), ("office2", 4), ("office3", 5)] {
            assert_eq!(s.users.iter().filter(|u| u.room == room).count(), n);
        }
    }

    #[test]
    fn primaries_are_distinct_within_rooms() {
        let s = office_users(1, 1, 60.0);
        for room in ["office1", "office2", "office3"] {
            let mut primaries: Vec<_> = s
                .users
                .iter()
                .filter(|u| u.room == room)
                .map(|u| u.preferences[0].app.clone())
                .collect();
            let n = primaries.len();
            primaries.sort();
            primaries.dedup();
            assert_eq!(primaries.len(), n);
        }
    }
}
