//! Applies [`SchedAttr`] to the calling thread and verifies the result by
//! reading it back from the kernel.
//!
//! When the kernel refuses (typically for lack of `CAP_SYS_NICE`), the thread
//! is put back on the fair class at nice 0 and the outcome says so; a
//! fallback is never reported as applied. Setting
//! `ISOLEXEC_FORCE_SCHED_FALLBACK=1` skips all scheduler calls and forces
//! that fallback path, which keeps CI runs deterministic.
//!
//! `SCHED_DEADLINE` threads must be allowed on every CPU of their root
//! domain, so the kernel rejects a deadline request combined with a
//! restricted affinity; that request ends in a fallback.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_sched_attr, Policy, SchedAttr, Violation};

pub const FORCE_FALLBACK_ENV: &str = "ISOLEXEC_FORCE_SCHED_FALLBACK";

pub fn fallback_forced() -> bool {
    std::env::var(FORCE_FALLBACK_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Available,
    Denied,
    UnsupportedPlatform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityReport {
    pub deadline: Availability,
    pub fifo_rt: Availability,
    pub fair: Availability,
    pub core_count: usize,
    /// Set when the fallback override is active; applies will not touch the OS.
    pub forced_fallback: bool,
}

impl CapabilityReport {
    pub fn supports(&self, policy: &Policy) -> bool {
        let a = match policy {
            Policy::Deadline { .. } => self.deadline,
            Policy::FifoRt { .. } => self.fifo_rt,
            Policy::Fair { .. } => self.fair,
        };
        a == Availability::Available && !self.forced_fallback
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum EnforcementOutcome {
    /// The kernel's view of the thread matches the request.
    Applied { readback: SchedAttr },
    Fallback {
        intended: SchedAttr,
        actual: SchedAttr,
        reason: FallbackReason,
    },
}

impl EnforcementOutcome {
    pub fn is_applied(&self) -> bool {
        matches!(self, EnforcementOutcome::Applied { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FallbackReason {
    Forced,
    Denied(String),
    /// The call succeeded but the read-back differs from the request.
    EnforceMismatch(String),
    UnsupportedPlatform,
}

impl fmt::Display for FallbackReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FallbackReason::Forced => write!(f, "forced by {FORCE_FALLBACK_ENV}"),
            FallbackReason::Denied(e) => write!(f, "denied: {e}"),
            FallbackReason::EnforceMismatch(e) => write!(f, "read-back mismatch: {e}"),
            FallbackReason::UnsupportedPlatform => f.write_str("unsupported platform"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid scheduling attributes: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidAttr(Vec<Violation>),
}

/// Number of online CPUs.
pub fn core_count() -> usize {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
    if n > 0 {
        n as usize
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// CPU the calling thread is running on right now.
pub fn current_cpu() -> Option<usize> {
    // SAFETY: sched_getcpu has no preconditions.
    let cpu = unsafe { libc::sched_getcpu() };
    (cpu >= 0).then_some(cpu as usize)
}

#[cfg(target_os = "linux")]
mod sys {
    use std::collections::BTreeSet;
    use std::io;
    use std::mem;

    use crate::model::{Policy, SchedAttr};

    const SCHED_DEADLINE: u32 = 6;
    const SCHED_ATTR_SIZE_VER0: u32 = 48;

    #[repr(C)]
    #[derive(Debug, Default, Clone, Copy)]
    struct RawSchedAttr {
        size: u32,
        sched_policy: u32,
        sched_flags: u64,
        sched_nice: i32,
        sched_priority: u32,
        sched_runtime: u64,
        sched_deadline: u64,
        sched_period: u64,
    }

    pub fn set_policy(policy: &Policy) -> io::Result<()> {
        let mut raw = RawSchedAttr {
            size: SCHED_ATTR_SIZE_VER0,
            ..Default::default()
        };
        match *policy {
            Policy::Deadline {
                runtime_ns,
                deadline_ns,
                period_ns,
            } => {
                raw.sched_policy = SCHED_DEADLINE;
                raw.sched_runtime = runtime_ns;
                raw.sched_deadline = deadline_ns;
                raw.sched_period = period_ns;
            }
            Policy::FifoRt { priority } => {
                raw.sched_policy = libc::SCHED_FIFO as u32;
                raw.sched_priority = priority as u32;
            }
            Policy::Fair { nice } => {
                raw.sched_policy = libc::SCHED_OTHER as u32;
                raw.sched_nice = nice;
            }
        }
        // SAFETY: raw is a properly sized, initialized sched_attr for tid 0 (self).
        let rc =
            unsafe { libc::syscall(libc::SYS_sched_setattr, 0, &raw as *const RawSchedAttr, 0) };
        if rc == 0 {
            Ok(())
        } else {
            Err(io::Error::last_os_error())
        }
    }

    pub fn get_policy() -> io::Result<Policy> {
        let mut raw = RawSchedAttr::default();
        // SAFETY: raw is writable and its size is passed.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_sched_getattr,
                0,
                &mut raw as *mut RawSchedAttr,
                mem::size_of::<RawSchedAttr>() as u32,
                0,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        let p = raw.sched_policy;
        Ok(if p == SCHED_DEADLINE {
            Policy::Deadline {
                runtime_ns: raw.sched_runtime,
                deadline_ns: raw.sched_deadline,
                period_ns: raw.sched_period,
            }
        } else if p == libc::SCHED_FIFO as u32 {
            Policy::FifoRt {
                priority: raw.sched_priority as i32,
            }
        } else if p == libc::SCHED_OTHER as u32 {
            Policy::Fair {
                nice: raw.sched_nice,
            }
        } else {
            return Err(io::Error::other(format!(
                "thread runs under unmodelled policy {p}"
            )));
        })
    }

    pub fn set_affinity(cores: &BTreeSet<usize>) -> io::Result<()> {
        // SAFETY: cpu_set_t is plain data; the CPU_* helpers bound-check.
        unsafe {
            let mut set: libc::cpu_set_t = mem::zeroed();
            libc::CPU_ZERO(&mut set);
            for &c in cores {
                if c >= libc::CPU_SETSIZE as usize {
                    return Err(io::Error::from_raw_os_error(libc::EINVAL));
                }
                libc::CPU_SET(c, &mut set);
            }
            if libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), &set) == 0 {
                Ok(())
            } else {
                Err(io::Error::last_os_error())
            }
        }
    }

    pub fn get_affinity() -> io::Result<BTreeSet<usize>> {
        // SAFETY: as above.
        unsafe {
            let mut set: libc::cpu_set_t = mem::zeroed();
            if libc::sched_getaffinity(0, mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok((0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .collect())
        }
    }

    pub fn read_back() -> io::Result<SchedAttr> {
        Ok(SchedAttr {
            policy: get_policy()?,
            affinity: get_affinity()?,
        })
    }
}

/// Kernel's current view of the calling thread.
#[cfg(target_os = "linux")]
pub fn current_thread_sched() -> std::io::Result<SchedAttr> {
    sys::read_back()
}

#[cfg(target_os = "linux")]
pub fn probe_capabilities() -> CapabilityReport {
    let probe = |policy: Policy| -> Availability {
        std::thread::spawn(move || match sys::set_policy(&policy) {
            Ok(()) => {
                let _ = sys::set_policy(&Policy::Fair { nice: 0 });
                Availability::Available
            }
            Err(_) => Availability::Denied,
        })
        .join()
        .unwrap_or(Availability::Denied)
    };
    CapabilityReport {
        deadline: probe(Policy::Deadline {
            runtime_ns: 100_000,
            deadline_ns: 10_000_000,
            period_ns: 10_000_000,
        }),
        fifo_rt: probe(Policy::FifoRt { priority: 1 }),
        fair: probe(Policy::Fair { nice: 0 }),
        core_count: core_count(),
        forced_fallback: fallback_forced(),
    }
}

#[cfg(not(target_os = "linux"))]
pub fn probe_capabilities() -> CapabilityReport {
    CapabilityReport {
        deadline: Availability::UnsupportedPlatform,
        fifo_rt: Availability::UnsupportedPlatform,
        fair: Availability::UnsupportedPlatform,
        core_count: core_count(),
        forced_fallback: fallback_forced(),
    }
}

fn matches_request(req: &SchedAttr, got: &SchedAttr) -> Result<(), String> {
    if req.policy != got.policy {
        return Err(format!(
            "requested {:?}, kernel reports {:?}",
            req.policy, got.policy
        ));
    }
    if !req.affinity.is_empty() && req.affinity != got.affinity {
        return Err(format!(
            "requested cores {:?}, kernel reports {:?}",
            req.affinity, got.affinity
        ));
    }
    Ok(())
}

/// Applies `attr` to the calling thread.
#[cfg(target_os = "linux")]
pub fn apply_to_current_thread(attr: &SchedAttr) -> Result<EnforcementOutcome, SchedError> {
    validate_sched_attr(attr, Some(core_count())).map_err(SchedError::InvalidAttr)?;
    let fair = SchedAttr::fair(0);
    if fallback_forced() {
        return Ok(EnforcementOutcome::Fallback {
            intended: attr.clone(),
            actual: sys::read_back().unwrap_or(fair),
            reason: FallbackReason::Forced,
        });
    }

    let original_affinity = sys::get_affinity().unwrap_or_default();
    let attempt = (|| -> Result<SchedAttr, FallbackReason> {
        // Policy goes first: leaving a deadline task requires full affinity.
        sys::set_policy(&attr.policy).map_err(|e| FallbackReason::Denied(e.to_string()))?;
        if !attr.affinity.is_empty() {
            sys::set_affinity(&attr.affinity).map_err(|e| FallbackReason::Denied(e.to_string()))?;
        }
        let got = sys::read_back().map_err(|e| FallbackReason::EnforceMismatch(e.to_string()))?;
        matches_request(attr, &got).map_err(FallbackReason::EnforceMismatch)?;
        Ok(got)
    })();

    Ok(match attempt {
        Ok(readback) => EnforcementOutcome::Applied { readback },
        Err(reason) => {
            let _ = sys::set_policy(&fair.policy);
            if !original_affinity.is_empty() {
                let _ = sys::set_affinity(&original_affinity);
            }
            EnforcementOutcome::Fallback {
                intended: attr.clone(),
                actual: sys::read_back().unwrap_or(fair),
                reason,
            }
        }
    })
}

#[cfg(not(target_os = "linux"))]
pub fn apply_to_current_thread(attr: &SchedAttr) -> Result<EnforcementOutcome, SchedError> {
    validate_sched_attr(attr, Some(core_count())).map_err(SchedError::InvalidAttr)?;
    Ok(EnforcementOutcome::Fallback {
        intended: attr.clone(),
        actual: SchedAttr::fair(0),
        reason: if fallback_forced() {
            FallbackReason::Forced
        } else {
            FallbackReason::UnsupportedPlatform
        },
    })
}

/// Puts the calling thread back on the fair class at nice 0 on every core.
#[cfg(target_os = "linux")]
pub fn reset_current_thread() {
    let _ = sys::set_policy(&Policy::Fair { nice: 0 });
    let all: BTreeSet<usize> = (0..core_count()).collect();
    let _ = sys::set_affinity(&all);
}

#[cfg(not(target_os = "linux"))]
pub fn reset_current_thread() {}
