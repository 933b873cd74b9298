# recourse_tools/RunManifest.py
"""
Run manifest written next to every command's outputs.

A manifest records the command, the full configuration snapshot, seeds and
sha256 hashes of every input and output file. Re-running the command with the
recorded configuration reproduces the output hashes; timings are kept in a
separate block since they never match between runs.
"""
import hashlib
import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from importlib import metadata

from recourse_tools.errors import CorruptFile

logger = logging.getLogger('RunManifest')

MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = '1.0'
TRACKED_PACKAGES = ('numpy', 'scipy', 'pandas', 'scikit-learn', 'packaging')


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions():
    versions = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


class RunManifest:
    def __init__(self, command, out_dir, config=None, seeds=None):
        self.command = command
        self.out_dir = out_dir
        self.config = dict(config or {})
        self.seeds = dict(seeds or {})
        self.inputs = {}
        self.outputs = []
        self.timings = {}
        self.flags = {}
        self.artifacts = {}
        os.makedirs(out_dir, exist_ok=True)

    def add_input(self, role, path):
        if path is None:
            return
        self.inputs[role] = {'path': os.path.abspath(path), 'sha256': file_sha256(path)}

    def output_path(self, name):
        """Path for an output file in this run's directory; registered for hashing."""
        path = os.path.join(self.out_dir, name)
        if name not in self.outputs:
            self.outputs.append(name)
        return path

    def add_artifact(self, name, fmt, version):
        self.artifacts[name] = {'format': fmt, 'version': version}

    def set_flag(self, key, value):
        self.flags[key] = value

    @contextmanager
    def timed(self, label):
        start = time.time()
        try:
            yield
        finally:
            self.timings[label] = self.timings.get(label, 0.0) + time.time() - start

    def to_dict(self):
        outputs = {}
        for name in self.outputs:
            path = os.path.join(self.out_dir, name)
            outputs[name] = file_sha256(path) if os.path.isfile(path) else None
        return {
            'manifest_version': MANIFEST_VERSION,
            'command': self.command,
            'config': self.config,
            'seeds': self.seeds,
            'inputs': self.inputs,
            'outputs': outputs,
            'artifacts': self.artifacts,
            'flags': self.flags,
            'versions': package_versions(),
            'timings': {k: round(v, 3) for k, v in self.timings.items()},
        }

    def write(self):
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)
        logger.info(f"Manifest written to {path} ({len(self.outputs)} output(s))")
        return path


def _jsonable(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    return str(value)


def load_manifest(path):
    """Manifest dict from a file or from a directory holding one."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptFile(f"{path}: not a run manifest ({e})") from None
    if not isinstance(payload, dict) or 'command' not in payload:
        raise CorruptFile(f"{path}: not a run manifest")
    return payload


def find_manifest(data_path):
    """Manifest sitting next to an output file, or None."""
    candidate = os.path.join(os.path.dirname(os.path.abspath(data_path)), MANIFEST_NAME)
    return load_manifest(candidate) if os.path.isfile(candidate) else None
