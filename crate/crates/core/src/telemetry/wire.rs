//! Fixed-layout binary packets exchanged with the base station.
//!
//! Everything is little-endian and ends in a CRC-32 (IEEE) over all prior bytes.
//! The byte-level layout is documented in `docs/wire_format.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{Flag, Role};

pub const TELEMETRY_MAGIC: [u8; 4] = *b"RSTL";
pub const COMMAND_MAGIC: [u8; 4] = *b"RSCM";
pub const WIRE_VERSION: u8 = 1;
pub const TELEMETRY_LEN: usize = 74;
pub const COMMAND_LEN: usize = 22;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("bad magic")]
    Magic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unknown enum code {0}")]
    Code(u8),
    #[error("malformed payload")]
    Payload,
}

pub fn flag_code(f: Flag) -> u8 {
    match f {
        Flag::Green => 0,
        Flag::WavingGreen => 1,
        Flag::Yellow => 2,
        Flag::Red => 3,
    }
}

pub fn flag_from_code(c: u8) -> Result<Flag, DecodeError> {
    Ok(match c {
        0 => Flag::Green,
        1 => Flag::WavingGreen,
        2 => Flag::Yellow,
        3 => Flag::Red,
        _ => return Err(DecodeError::Code(c)),
    })
}

pub fn role_code(r: Role) -> u8 {
    match r {
        Role::Attacker => 0,
        Role::Defender => 1,
    }
}

pub fn role_from_code(c: u8) -> Result<Role, DecodeError> {
    Ok(match c {
        0 => Role::Attacker,
        1 => Role::Defender,
        _ => return Err(DecodeError::Code(c)),
    })
}

/// Bit positions of the 16-bit health field.
pub mod health_bits {
    pub const UNIT_A_POSE: u16 = 1 << 0;
    pub const UNIT_A_VELOCITY: u16 = 1 << 1;
    pub const UNIT_A_HEADING: u16 = 1 << 2;
    pub const UNIT_A_WATCHDOG: u16 = 1 << 3;
    pub const UNIT_B_POSE: u16 = 1 << 4;
    pub const UNIT_B_VELOCITY: u16 = 1 << 5;
    pub const UNIT_B_HEADING: u16 = 1 << 6;
    pub const UNIT_B_WATCHDOG: u16 = 1 << 7;
    pub const WHEELS: u16 = 1 << 8;
    pub const COVARIANCE_ALARM: u16 = 1 << 9;
    pub const SAFE_STOP: u16 = 1 << 10;
    pub const OPPONENT_TRACKED: u16 = 1 << 11;
    pub const CONTROLLER_DEGRADED: u16 = 1 << 12;
    pub const TRACTION_LOST: u16 = 1 << 13;
}

/// One telemetry snapshot, already at wire precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPacket {
    pub seq: u32,
    pub sim_time: f64,
    pub x: f32,
    pub y: f32,
    pub psi: f32,
    pub speed: f32,
    pub target_speed: f32,
    pub flag: Flag,
    pub role: Role,
    pub opponent_present: bool,
    pub opponent_x: f32,
    pub opponent_y: f32,
    pub opponent_speed: f32,
    pub health: u16,
    pub cte: f32,
    pub steer: f32,
    pub throttle: f32,
    pub brake: f32,
}

struct Writer<'a> {
    buf: &'a mut [u8],
    at: usize,
}

impl Writer<'_> {
    fn put(&mut self, b: &[u8]) {
        self.buf[self.at..self.at + b.len()].copy_from_slice(b);
        self.at += b.len();
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.at..self.at + N]);
        self.at += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

fn check_frame(bytes: &[u8], len: usize, magic: &[u8; 4]) -> Result<(), DecodeError> {
    if bytes.len() != len {
        return Err(DecodeError::Length {
            expected: len,
            got: bytes.len(),
        });
    }
    // checksum first so that any corruption, including of magic or version, reports as such
    let body = &bytes[..len - 4];
    let crc = u32::from_le_bytes(bytes[len - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(DecodeError::Checksum);
    }
    if &bytes[..4] != magic {
        return Err(DecodeError::Magic);
    }
    if bytes[4] != WIRE_VERSION {
        return Err(DecodeError::Version(bytes[4]));
    }
    Ok(())
}

impl TelemetryPacket {
    pub fn encode(&self) -> [u8; TELEMETRY_LEN] {
        let mut buf = [0u8; TELEMETRY_LEN];
        let mut w = Writer { buf: &mut buf, at: 0 };
        w.put(&TELEMETRY_MAGIC);
        w.put(&[WIRE_VERSION]);
        w.put(&self.seq.to_le_bytes());
        w.put(&self.sim_time.to_le_bytes());
        for v in [self.x, self.y, self.psi, self.speed, self.target_speed] {
            w.put(&v.to_le_bytes());
        }
        w.put(&[flag_code(self.flag), role_code(self.role), self.opponent_present as u8]);
        for v in [self.opponent_x, self.opponent_y, self.opponent_speed] {
            w.put(&v.to_le_bytes());
        }
        w.put(&self.health.to_le_bytes());
        for v in [self.cte, self.steer, self.throttle, self.brake] {
            w.put(&v.to_le_bytes());
        }
        let at = w.at;
        let crc = crc32fast::hash(&buf[..at]);
        buf[at..].copy_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        check_frame(bytes, TELEMETRY_LEN, &TELEMETRY_MAGIC)?;
        let mut r = Reader { buf: bytes, at: 5 };
        let seq = u32::from_le_bytes(r.take());
        let sim_time = f64::from_le_bytes(r.take());
        let (x, y, psi, speed, target_speed) = (r.f32(), r.f32(), r.f32(), r.f32(), r.f32());
        let flag = flag_from_code(r.u8())?;
        let role = role_from_code(r.u8())?;
        let opponent_present = match r.u8() {
            0 => false,
            1 => true,
            c => return Err(DecodeError::Code(c)),
        };
        let (opponent_x, opponent_y, opponent_speed) = (r.f32(), r.f32(), r.f32());
        let health = u16::from_le_bytes(r.take());
        let (cte, steer, throttle, brake) = (r.f32(), r.f32(), r.f32(), r.f32());
        Ok(TelemetryPacket {
            seq,
            sim_time,
            x,
            y,
            psi,
            speed,
            target_speed,
            flag,
            role,
            opponent_present,
            opponent_x,
            opponent_y,
            opponent_speed,
            health,
            cte,
            steer,
            throttle,
            brake,
        })
    }
}

/// Which car a flag applies to; `All` broadcasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarSelector {
    All,
    Car(u8),
}

impl CarSelector {
    pub fn code(self) -> u8 {
        match self {
            CarSelector::All => 0xff,
            CarSelector::Car(i) => i,
        }
    }

    pub fn from_code(c: u8) -> Self {
        if c == 0xff {
            CarSelector::All
        } else {
            CarSelector::Car(c)
        }
    }

    pub fn matches(self, car: usize) -> bool {
        match self {
            CarSelector::All => true,
            CarSelector::Car(i) => i as usize == car,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandKind {
    SetFlag { flag: Flag, car: CarSelector },
    SetRoundSpeed { speed: f64 },
    EmergencyStop,
    ResetLatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorCommand {
    pub seq: u32,
    #[serde(flatten)]
    pub kind: CommandKind,
}

impl OperatorCommand {
    pub fn encode(&self) -> [u8; COMMAND_LEN] {
        let mut buf = [0u8; COMMAND_LEN];
        let mut w = Writer { buf: &mut buf, at: 0 };
        w.put(&COMMAND_MAGIC);
        w.put(&[WIRE_VERSION]);
        let (code, payload) = match self.kind {
            CommandKind::SetFlag { flag, car } => (0u8, [flag_code(flag), car.code(), 0, 0, 0, 0, 0, 0]),
            CommandKind::SetRoundSpeed { speed } => (1, speed.to_le_bytes()),
            CommandKind::EmergencyStop => (2, [0; 8]),
            CommandKind::ResetLatch => (3, [0; 8]),
        };
        w.put(&[code]);
        w.put(&self.seq.to_le_bytes());
        w.put(&payload);
        let at = w.at;
        let crc = crc32fast::hash(&buf[..at]);
        buf[at..].copy_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        check_frame(bytes, COMMAND_LEN, &COMMAND_MAGIC)?;
        let mut r = Reader { buf: bytes, at: 5 };
        let code = r.u8();
        let seq = u32::from_le_bytes(r.take());
        let payload: [u8; 8] = r.take();
        let kind = match code {
            0 => {
                if payload[2..].iter().any(|&b| b != 0) {
                    return Err(DecodeError::Payload);
                }
                CommandKind::SetFlag {
                    flag: flag_from_code(payload[0])?,
                    car: CarSelector::from_code(payload[1]),
                }
            }
            1 => {
                let speed = f64::from_le_bytes(payload);
                if !(speed.is_finite() && speed >= 0.0) {
                    return Err(DecodeError::Payload);
                }
                CommandKind::SetRoundSpeed { speed }
            }
            2 | 3 => {
                if payload.iter().any(|&b| b != 0) {
                    return Err(DecodeError::Payload);
                }
                if code == 2 {
                    CommandKind::EmergencyStop
                } else {
                    CommandKind::ResetLatch
                }
            }
            c => return Err(DecodeError::Code(c)),
        };
        Ok(OperatorCommand { seq, kind })
    }
}
