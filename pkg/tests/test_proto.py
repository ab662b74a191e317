import socket
import struct
import threading

import numpy as np
import pytest

from continuum_rl.agent import Hyperparameters, MadqnLearner, run_episode, train
from continuum_rl.control import KmocController, gen_trajectory, track
from continuum_rl.env import EVAL_EPISODE, ContinuumEnv, EpisodeConfig, Target
from continuum_rl.errors import DomainError, EnvironmentFault
from continuum_rl.plant import PlantConfig
from continuum_rl.proto import (
    PAYLOAD_SIZES,
    ErrorCode,
    IncompleteFrame,
    Kind,
    LengthMismatch,
    Message,
    PlantServer,
    RemoteEnv,
    UnknownKind,
    decode,
    encode,
    parse_endpoint,
    recv_message,
    split_frames,
)
from continuum_rl.seeding import Streams
from continuum_rl.shield import ShieldConfig

SMALL = Hyperparameters(buffer_capacity=64, batch_size=8, target_sync=5)


def test_act_frame_layout():
    frame = encode(Message(Kind.ACT, 7, (0.1, -0.2)))
    assert frame == struct.pack("<IBIdd", 21, 3, 7, 0.1, -0.2)
    msg, used = decode(frame)
    assert used == len(frame)
    assert msg.values == (0.1, -0.2) and msg.seq == 7 and not msg.reply


def test_reply_flag_roundtrip():
    m = Message(Kind.INFO, 3, tuple(range(16)), reply=True)
    frame = encode(m)
    assert frame[4] == 0x84
    assert decode(frame)[0] == m


def test_roundtrip_random_frames():
    rng = np.random.default_rng(0)
    keys = list(PAYLOAD_SIZES)
    raw = rng.integers(0, 2**63, size=(100_000, 16), dtype=np.uint64)
    for i in range(100_000):
        kind, reply = keys[i % len(keys)]
        n = PAYLOAD_SIZES[(kind, reply)]
        vals = raw[i, :n].view(np.float64)
        vals = np.where(np.isnan(vals), 0.0, vals)
        m = Message(kind, int(raw[i, 15] % 2**32), tuple(vals), reply)
        frame = encode(m)
        back, used = decode(frame)
        assert used == len(frame)
        assert back.kind == m.kind and back.seq == m.seq and back.reply == m.reply
        assert np.array(back.values).tobytes() == np.array(m.values).tobytes()


def test_decode_errors():
    with pytest.raises(IncompleteFrame):
        decode(b"")
    frame = encode(Message(Kind.ACT, 1, (0.1, 0.2)))
    with pytest.raises(IncompleteFrame):
        decode(frame[:-1])
    bad = bytearray(frame)
    bad[4] = 0xFF
    with pytest.raises(UnknownKind):
        decode(bytes(bad))
    with pytest.raises(LengthMismatch):
        decode(struct.pack("<IBI", 5, int(Kind.ACT), 1))
    with pytest.raises(LengthMismatch):
        decode(struct.pack("<IBI", 6, int(Kind.ACT), 1) + b"x")
    with pytest.raises(LengthMismatch):
        Message(Kind.ACT, 1, (0.1,))


def test_split_frames_keeps_remainder():
    a = encode(Message(Kind.OBSERVE, 1))
    b = encode(Message(Kind.ACT, 2, (0.1, 0.1)))
    msgs, rest = split_frames(a + b + b[:5])
    assert [m.seq for m in msgs] == [1, 2]
    assert rest == b[:5]
    assert split_frames(b"") == ([], b"")


def test_parse_endpoint(monkeypatch):
    monkeypatch.setenv("CONTINUUM_RL_PORT", "6001")
    assert parse_endpoint(None) == ("127.0.0.1", 6001)
    assert parse_endpoint("localhost") == ("localhost", 6001)
    assert parse_endpoint("10.0.0.2:7000") == ("10.0.0.2", 7000)


@pytest.fixture
def server():
    env = ContinuumEnv(PlantConfig(), EpisodeConfig(max_steps=25))
    with PlantServer(env, "127.0.0.1:0") as srv:
        yield srv


def test_reset_then_observe(server):
    with RemoteEnv(server.endpoint) as remote:
        obs = remote.reset(Target(10, -10))
        assert (obs.delta1, obs.delta2) == (10.0, -10.0)
        assert remote.observe() == obs
        assert remote.episode_cfg.max_steps == 25


def test_remote_domain_error(server):
    with RemoteEnv(server.endpoint) as remote:
        with pytest.raises(DomainError):
            remote.reset(Target(500, 0))
        # the connection stays usable
        assert remote.reset(Target(1, 1)).delta1 == 1.0


def test_second_client_is_refused(server):
    with RemoteEnv(server.endpoint):
        s = socket.create_connection((server.host, server.port), timeout=2)
        msg = recv_message(s)
        s.close()
        assert msg.kind is Kind.ERROR and msg.values == (float(ErrorCode.BUSY),)


def test_info_mismatch_is_startup_error(server):
    wrong = list(server.env.info())
    wrong[1] += 1.0
    with pytest.raises(EnvironmentFault):
        RemoteEnv(server.endpoint, expected_info=wrong)
    with RemoteEnv(server.endpoint, expected_info=server.env.info()):
        pass


def test_timeout_marks_episode_failed():
    lsock = socket.socket()
    lsock.bind(("127.0.0.1", 0))
    lsock.listen(1)
    port = lsock.getsockname()[1]
    held = []
    release = threading.Event()

    def silent():
        conn, _ = lsock.accept()
        held.append(conn)
        # answer INFO so the client starts, then go quiet
        msg = recv_message(conn)
        conn.sendall(encode(Message(Kind.INFO, msg.seq, ContinuumEnv().info(), reply=True)))
        release.wait(5)

    t = threading.Thread(target=silent, daemon=True)
    t.start()
    remote = RemoteEnv(f"127.0.0.1:{port}", timeout=0.3)
    learner = MadqnLearner.create(SMALL, Streams(0), ShieldConfig(enabled=False), topology=(2, 8, 4))
    log = run_episode(remote, learner, Target(10, -10), Streams(0))
    assert log.fault and not log.success
    release.set()
    remote.close()
    for c in held:
        c.close()
    lsock.close()


def test_unreachable_plant():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(EnvironmentFault):
        RemoteEnv(f"127.0.0.1:{port}", timeout=0.5)


def _train(env, seed=9):
    s = Streams(seed)
    learner = MadqnLearner.create(SMALL, s, ShieldConfig(enabled=False), topology=(2, 16, 16, 4))
    _, log = train(env, SMALL, s, learner=learner, episodes=4)
    return log.to_csv(), [ag.net.flat.tobytes() for ag in learner.agents]


def test_loopback_training_matches_local():
    cfg = PlantConfig(payload_mass_g=10.0, tip_noise_std=0.02)
    ecfg = EpisodeConfig(max_steps=25)
    local = _train(ContinuumEnv(cfg, ecfg, rng=Streams(9)["noise"]))
    with PlantServer(ContinuumEnv(cfg, ecfg, rng=Streams(9)["noise"]), "127.0.0.1:0") as srv:
        with RemoteEnv(srv.endpoint) as remote:
            remote_result = _train(remote)
    assert local == remote_result


def test_loopback_tracking_matches_local():
    cfg = PlantConfig(hysteresis_deadband=0.3)
    tr = gen_trajectory("circle", dict(radius=5.0, samples=60), cfg)
    local = track(KmocController(cfg), ContinuumEnv(cfg, EVAL_EPISODE), tr)
    with PlantServer(ContinuumEnv(cfg, EVAL_EPISODE), "127.0.0.1:0") as srv:
        with RemoteEnv(srv.endpoint) as remote:
            remote_run = track(KmocController(cfg), remote, tr)
    assert local.metrics.errors.tobytes() == remote_run.metrics.errors.tobytes()
    assert local.plot_data() == remote_run.plot_data()
