"""``qnetctl`` command-line entry point.

One process can stand up the whole simulated network (local or TCP agents)
and run any routine against it, or just serve the device agents over TCP.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__
from . import control as ctl
from .config import ConfigError, RunConfig, load_config, load_profile, parse_config, resolve_endpoints
from .devices import build_agents, matrix_to_wire
from .network import Network
from .rpc.agent import AgentServer
from .rpc.client import RemoteError, RetryPolicy, TransportError
from .services import fringe, tomography
from .services.service import HOUR, ServiceConfig, entanglement_service
from .testbed import Testbed

log = logging.getLogger("qnetctl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DARK_ABORT = 3
EXIT_CALIBRATION = 4
EXIT_TRANSPORT = 5
EXIT_SYNC = 6

SERVICE_EXIT = {"completed": EXIT_OK, "dark_count_abort": EXIT_DARK_ABORT,
                "calibration_failure": EXIT_CALIBRATION, "transport_failure": EXIT_TRANSPORT}

COMMANDS = ("sync", "darkcheck", "calibrate-eps", "compensate", "tpi", "qst", "service", "serve-agents")


class Session:
    """Validated config + profile + a connected :class:`Network`, and the artifact writer."""

    def __init__(self, cfg: RunConfig, command: str, base_dir: Path | None = None):
        self.cfg = cfg
        self.command = command
        ref = cfg.profile
        if base_dir is not None and (base_dir / ref).is_file():
            ref = str(base_dir / ref)
        self.profile = load_profile(ref)
        for ev in cfg.drift_events:
            if ev.site not in self.profile.sites:
                raise ConfigError(f"drift_events: unknown site {ev.site!r} (profile sites {list(self.profile.sites)})")
        self.window = cfg.coincidence_window_ps or self.profile.coincidence_window_ps
        self.out = Path(cfg.output_dir)
        self.digest = cfg.digest()
        self.servers: list[AgentServer] = []
        self.net: Network | None = None

    # -- artifacts ------------------------------------------------------------

    @property
    def meta(self) -> dict:
        return {"config_digest": self.digest, "seed": self.cfg.seed, "profile": self.profile.name,
                "command": self.command, "version": __version__}

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text)
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        return self.write(name, json.dumps({**self.meta, **payload}, indent=2, sort_keys=True) + "\n")

    # -- network --------------------------------------------------------------

    def connect(self) -> Network:
        cfg = self.cfg
        sites = self.profile.sites
        policy = RetryPolicy(cfg.rpc.max_attempts, cfg.rpc.timeout_ms, cfg.rpc.backoff_ms)
        endpoints = resolve_endpoints(cfg, sites)
        if cfg.transport == "local":
            testbed = Testbed(self.profile.scenario(), cfg.seed)
            self.net = Network.local(build_agents(testbed), sites, policy)
        else:
            spawn = {n: ep for n, ep in endpoints.items() if ep.endswith(":0")}
            if spawn:
                if len(spawn) != len(endpoints):
                    raise ConfigError("endpoints: either spawn every agent (port 0) or point all at running agents")
                testbed = Testbed(self.profile.scenario(), cfg.seed)
                agents = build_agents(testbed)
                self.servers = [AgentServer(agents[n], ep).start() for n, ep in spawn.items()]
                endpoints = {srv.agent.name: srv.endpoint for srv in self.servers}
            self.net = Network.tcp(endpoints, sites, policy)
        return self.net

    def close(self) -> None:
        if self.net is not None:
            try:
                self.write("provenance.jsonl", self.net.provenance.to_jsonl())
            finally:
                self.net.close()
        for srv in self.servers:
            srv.stop()

    # -- shared steps -----------------------------------------------------------

    def sync(self) -> ctl.SyncReport:
        s = self.cfg.sync
        return ctl.synchronize_sites(self.net, duration=s.duration, lock_attempts=s.lock_attempts, min_pps=s.min_pps)

    def dark_bounds(self) -> ctl.DarkCountBounds:
        return ctl.DarkCountBounds(self.cfg.darkcheck.d_min, self.cfg.darkcheck.d_max)

    def calibration_kwargs(self) -> dict:
        c = self.cfg.calibration
        return {"grid": c.grid.values(), "target_fraction": c.target_fraction, "dwell": c.dwell,
                "min_coincidences": c.min_coincidences, "max_dwell": c.max_dwell,
                "target_accidentals": c.target_accidentals}

    def service_config(self) -> ServiceConfig:
        s, cfg = self.cfg.service, self.cfg
        return ServiceConfig(run_time=s.run_time_hours * HOUR, interval=s.interval_hours * HOUR,
                             threshold_mode=s.threshold_mode, threshold=s.threshold, auto_fraction=s.auto_fraction,
                             dark_bounds=self.dark_bounds(), time_compression=cfg.time_compression,
                             tpi_points=cfg.tpi.points, tpi_dwell=cfg.tpi.dwell, window=self.window,
                             dark_dwell=cfg.darkcheck.dwell, calibrate=s.calibrate)


# -- commands -------------------------------------------------------------------

def cmd_sync(sess: Session) -> int:
    rep = sess.sync()
    sess.write_json("sync.json", rep.to_dict())
    print(f"offset {rep.offset} ps, rms jitter {rep.rms_jitter:.2f} ps")
    return EXIT_OK


def cmd_darkcheck(sess: Session) -> int:
    rep = ctl.check_dark_counts(sess.net, sess.dark_bounds(), sess.cfg.darkcheck.dwell, raise_on_fail=False)
    sess.write_json("darkcheck.json", rep.to_dict())
    print("dark counts: " + ", ".join(f"{s}={r:.1f}/s" for s, r in rep.rates.items()))
    if not rep.passed:
        lo, hi = rep.bounds
        bad = [f"{s} {r:.1f}/s outside [{lo:g}, {hi:g}]" for s, r in rep.rates.items() if not lo <= r <= hi]
        print("ABORT: dark counts " + "; ".join(bad), file=sys.stderr)
        return EXIT_DARK_ABORT
    return EXIT_OK


def _compensate(sess: Session, dark_rates=None):
    return ctl.compensate_polarization_drift(sess.net, **sess.cfg.compensation.kwargs(), dark_rates=dark_rates)


def _prepare(sess: Session) -> None:
    """Sync and align the analyzers; the source stays at its current attenuation."""
    sess.sync()
    _compensate(sess)


def cmd_calibrate(sess: Session) -> int:
    _prepare(sess)  # calibration counts H/H coincidences, so the analyzers must be aligned
    cal = ctl.calibrate_eps(sess.net, window=sess.window, **sess.calibration_kwargs())
    sess.write_json("calibration.json", cal.to_dict())
    print(f"CAR_max {cal.car_max:.2f} at {cal.alpha_at_max} dB; operating point {cal.alpha_star} dB "
          f"(C={cal.c_star:.0f}/s, A={cal.a_star:.1f}/s, CAR={cal.car_star:.2f})")
    return EXIT_OK


def cmd_compensate(sess: Session) -> int:
    sess.sync()
    reports = _compensate(sess)
    sess.write_json("compensation.json", {"reports": [r.to_dict() for r in reports]})
    for r in reports:
        print(f"{r.site}: plates {np.round(r.final, 4).tolist()} converged={r.converged} "
              f"H-leak {r.min_h} D-leak {r.min_d} (dark {r.dark_rate:.1f}/s)")
    return EXIT_OK


def cmd_tpi(sess: Session) -> int:
    _prepare(sess)
    grid = fringe.default_grid(sess.cfg.tpi.points)
    result = fringe.run_tpi(sess.net, fringe.TPI_BASES, grid, sess.cfg.tpi.dwell, sess.window)
    sess.write("fringe.csv", fringe.fringe_csv(result, sess.meta))
    fits = result.fits()
    sess.write_json("tpi_fits.json", {"complete": result.complete, "error": result.error,
                                      "fits": {b: f.to_dict() for b, f in fits.items()}})
    for b, f in fits.items():
        print(f"V_{b} = {f.visibility:.4f}")
    if not result.complete:
        print(f"TPI incomplete at {result.failed_at}: {result.error}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_qst(sess: Session) -> int:
    _prepare(sess)
    rec = tomography.run_qst(sess.net, sess.cfg.qst.dwell, sess.window)
    sess.write_json("density_matrix.json", rec.to_dict())
    if not rec.complete:
        print(f"QST incomplete: {rec.error}", file=sys.stderr)
        return EXIT_TRANSPORT
    print(f"fidelity {rec.fidelity:.4f}, concurrence {rec.concurrence:.4f}")
    return EXIT_OK


def cmd_service(sess: Session) -> int:
    scfg = sess.service_config()
    drifts: dict[int, list] = {}
    for ev in sess.cfg.drift_events:
        drifts.setdefault(ev.at_iteration, []).append(ev)

    def before(k: int) -> None:
        for ev in drifts.get(k, []):
            log.info("scripted drift on %s before iteration %d", ev.site, k)
            sess.net.sim.call("sim.inject_misalignment", {"site": ev.site, "unitary": matrix_to_wire(ev.unitary())})

    def progress(it) -> None:
        vis = ", ".join(f"{b}={v:.3f}" for b, v in it.visibilities.items())
        print(f"iteration {it.index}: {vis}{'  -> realigned' if it.recalibrated else ''}", flush=True)

    sess.sync()
    rec = entanglement_service(sess.net, scfg, config_snapshot=sess.cfg.model_dump(mode="json"),
                               calibration_kwargs=sess.calibration_kwargs(),
                               compensation_kwargs=sess.cfg.compensation.kwargs(),
                               on_iteration=progress, before_iteration=before)
    sess.write("run_record.jsonl", rec.to_jsonl(sess.meta))
    summary = rec.to_dict()
    summary.pop("iterations")
    sess.write_json("service.json", {**summary, "iterations": len(rec.iterations)})
    print(f"service {rec.status}: {len(rec.iterations)} iterations, {rec.recalibrations} realignments"
          + (f" ({rec.message})" if rec.message else ""))
    return SERVICE_EXIT.get(rec.status, EXIT_ERROR)


def cmd_serve_agents(sess: Session, duration: float | None = None) -> int:
    """Serve every device agent over TCP until interrupted (or for ``duration`` seconds)."""
    cfg = sess.cfg
    endpoints = resolve_endpoints(cfg, sess.profile.sites)
    agents = build_agents(Testbed(sess.profile.scenario(), cfg.seed))
    sess.servers = [AgentServer(agents[n], ep).start() for n, ep in endpoints.items()]
    for srv in sess.servers:
        print(json.dumps({"agent": srv.agent.name, "endpoint": srv.endpoint}), flush=True)
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    stop.wait(duration)
    return EXIT_OK


HANDLERS = {"sync": cmd_sync, "darkcheck": cmd_darkcheck, "calibrate-eps": cmd_calibrate,
            "compensate": cmd_compensate, "tpi": cmd_tpi, "qst": cmd_qst, "service": cmd_service}


# -- argument handling ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults apply if omitted)")
    common.add_argument("--seed", type=int, help="override the configured random seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--compress", type=float, metavar="FACTOR", help="override time_compression")
    common.add_argument("--profile", help="override the scenario profile (built-in name or YAML path)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="qnetctl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qnetctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {"sync": "lock clocks and estimate the inter-site offset",
             "darkcheck": "measure dark counts with the source blocked",
             "calibrate-eps": "sweep pump attenuation and pick the operating point",
             "compensate": "run the waveplate alignment routine on both analyzers",
             "tpi": "two-photon interference fringes in H, V, R, L",
             "qst": "36-setting state tomography",
             "service": "continuous entanglement distribution with automatic realignment",
             "serve-agents": "serve the simulated device agents over TCP"}
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "serve-agents":
            p.add_argument("--duration", type=float, help="stop after this many seconds")
    return parser


def load_run_config(args) -> tuple[RunConfig, Path | None]:
    if args.config:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
    else:
        cfg, base = parse_config({}, "<defaults>"), None
    overrides = {k: v for k, v in (("seed", args.seed), ("output_dir", args.out),
                                   ("time_compression", args.compress), ("profile", args.profile)) if v is not None}
    if overrides:
        cfg = parse_config({**cfg.model_dump(mode="json"), **overrides}, "command line")
    return cfg, base


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sess = None
    try:
        cfg, base = load_run_config(args)
        sess = Session(cfg, args.command, base)
        if args.command == "serve-agents":
            return cmd_serve_agents(sess, args.duration)
        sess.connect()
        return HANDLERS[args.command](sess)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ctl.DarkCountAbort as exc:
        print(f"ABORT: {exc}", file=sys.stderr)
        return EXIT_DARK_ABORT
    except ctl.CalibrationFailure as exc:
        print(f"calibration failure: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except ctl.SyncFailure as exc:
        print(f"synchronization failure: {exc}", file=sys.stderr)
        return EXIT_SYNC
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ctl.ControlError, RemoteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        if sess is not None:
            sess.close()


if __name__ == "__main__":
    sys.exit(main())
