//! Regenerates the scenario fixtures: `cargo run -p cocarry-core --example make_fixtures -- fixtures`
//!
//! Each scenario is a short reach from a relaxed posture into a carrying
//! posture, sampled at 30 Hz and written through forward kinematics so the
//! frames are exact for the stated segment lengths.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use cocarry::ik::{ObservedArm, SkeletonFrame};
use cocarry::pipeline::write_frames_csv;
use cocarry::posture_opt::{split, BimanualAngles};
use cocarry::skeleton::{forward_kinematics, BodyGeometry};
use cocarry::Vec3;
use nalgebra::{UnitQuaternion, Vector3};

struct Spec {
    name: &'static str,
    about: &'static str,
    upper_arm: f64,
    forearm: f64,
    /// Carrying posture, `[left q1..q4, right q1..q4]`.
    carry: BimanualAngles,
    disturbance: bool,
}

const RELAXED: BimanualAngles = [0.05, 0.1, 0.0, -1.2, 0.05, 0.1, 0.0, -1.2];
const FRAMES: usize = 31;
const RATE: f64 = 30.0;

fn specs() -> Vec<Spec> {
    vec![
        Spec {
            name: "table",
            about: "Lifting a table top from a low grasp, elbows almost straight.",
            upper_arm: 0.31,
            forearm: 0.27,
            carry: [0.2, 1.05, 0.1, -1.25, 0.22, 1.0, 0.05, -1.2],
            disturbance: false,
        },
        Spec {
            name: "box",
            about: "Chest-height box carry with abducted shoulders; 10 N push on the left robot arm at t = 1 s.",
            upper_arm: 0.29,
            forearm: 0.25,
            carry: [0.65, 0.85, 0.2, 0.45, 0.6, 0.9, 0.15, 0.5],
            disturbance: true,
        },
        Spec {
            name: "screen",
            about: "Raising a large screen above shoulder height.",
            upper_arm: 0.33,
            forearm: 0.28,
            carry: [0.35, 1.75, -0.1, -0.7, 0.3, 1.7, -0.05, -0.75],
            disturbance: false,
        },
    ]
}

fn frame(t: f64, q: &BimanualAngles, geom: &BodyGeometry) -> SkeletonFrame {
    let (l, r) = split(q);
    let (pl, pr) = (forward_kinematics(&l, geom), forward_kinematics(&r, geom));
    SkeletonFrame {
        time: t,
        left: ObservedArm { shoulder: pl.shoulder, elbow: pl.elbow, wrist: pl.wrist },
        right: ObservedArm { shoulder: pr.shoulder, elbow: pr.elbow, wrist: pr.wrist },
    }
}

fn fmt3(v: &Vec3) -> String {
    format!("[{:.6}, {:.6}, {:.6}]", v.x, v.y, v.z)
}

fn fmt_q(q: &UnitQuaternion<f64>) -> String {
    format!("[{:.9}, {:.9}, {:.9}, {:.9}]", q.w, q.i, q.j, q.k)
}

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(&dir)?;
    // human stands 1.1 m in front of the robot base, facing it, feet 0.8 m below the base
    let human_pos = Vector3::new(0.0, 1.1, -0.8);
    let human_rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
    let to_robot = |p: &Vec3| human_pos + human_rot * p;

    for spec in specs() {
        let geom = BodyGeometry::new(
            spec.upper_arm,
            spec.forearm,
            Vector3::new(0.19, 0.0, 1.42),
            Vector3::new(-0.19, 0.0, 1.42),
        )
        .expect("valid geometry");
        let frames: Vec<SkeletonFrame> = (0..FRAMES)
            .map(|k| {
                let s = k as f64 / (FRAMES - 1) as f64;
                let q: BimanualAngles = std::array::from_fn(|i| RELAXED[i] + s * (spec.carry[i] - RELAXED[i]));
                frame(k as f64 / RATE, &q, &geom)
            })
            .collect();
        let csv_name = format!("{}_frames.csv", spec.name);
        write_frames_csv(fs::File::create(dir.join(&csv_name))?, &frames)?;

        let last = frames.last().expect("frames");
        let (wl, wr) = (to_robot(&last.left.wrist), to_robot(&last.right.wrist));
        let mid = 0.5 * (wl + wr);
        // robot grips the far edge; its grasp line runs through the object center
        let object = mid + Vector3::new(0.0, -0.2, 0.0);
        let half = 0.5 * (wl - wr).norm();
        let grip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -std::f64::consts::FRAC_PI_2);
        let robot_l = object + Vector3::new(half, 0.0, 0.0);
        let robot_r = object + Vector3::new(-half, 0.0, 0.0);

        let mut toml = String::new();
        writeln!(toml, "# {}", spec.about).unwrap();
        writeln!(toml, "# Generated by crates/core/examples/make_fixtures.rs").unwrap();
        writeln!(toml, "seed = 7\nframes = \"{csv_name}\"\n").unwrap();
        writeln!(toml, "[human_frame]\nposition = {}\norientation = {}\n", fmt3(&human_pos), fmt_q(&human_rot))
            .unwrap();
        writeln!(toml, "[object]\nmass = 5.0\npose = {{ position = {} }}\n", fmt3(&object)).unwrap();
        writeln!(toml, "[robot]").unwrap();
        writeln!(toml, "left = {{ position = {}, orientation = {} }}", fmt3(&robot_l), fmt_q(&grip)).unwrap();
        writeln!(toml, "right = {{ position = {}, orientation = {} }}\n", fmt3(&robot_r), fmt_q(&grip)).unwrap();
        writeln!(
            toml,
            "[optimizer]\nalpha = 1.0\nbeta = 0.5\ngamma = 0.2\nepsilon = 0.02\nload_direction = [0.0, 0.0, 1.0]\n"
        )
        .unwrap();
        writeln!(toml, "[controller]\ndt = 0.01\nhorizon = 20").unwrap();
        if spec.disturbance {
            let name = format!("{}_disturbance.csv", spec.name);
            fs::write(
                dir.join(&name),
                "# time,arm,fx,fy,fz (N, robot frame)\ntime,arm,fx,fy,fz\n1.0,left,10.0,0.0,0.0\n",
            )?;
            writeln!(toml, "\n[simulation]\ndisturbances = \"{name}\"").unwrap();
        }
        fs::write(dir.join(format!("{}.toml", spec.name)), toml)?;
    }
    Ok(())
}
