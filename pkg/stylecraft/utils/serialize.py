#!/usr/bin/python3

"""
SCT1 tensor files and bundles.

A tensor file is the magic bytes "SCT1", one JSON header line
({"dtype", "name", "shape"}) and the raw little-endian values. A bundle is
a directory of tensor files plus manifest.json.
"""

import hashlib
import json
import os
from collections import OrderedDict

import numpy as np

from stylecraft.errors import BundleError

MAGIC = b'SCT1'
MANIFEST = 'manifest.json'
CODES = {'f32': '<f4', 'f64': '<f8'}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, separators=(',', ': '))


def config_hash(obj):
    return hashlib.sha1(json.dumps(obj, sort_keys=True).encode('utf-8')).hexdigest()


def digest(array):
    array = np.ascontiguousarray(array)
    h = hashlib.sha1()
    h.update(str(array.dtype).encode('ascii'))
    h.update(str(array.shape).encode('ascii'))
    h.update(array.tobytes())
    return h.hexdigest()


def write_tensor(path, name, array):
    array = np.asarray(array)
    dtype = 'f64' if array.dtype == np.float64 else 'f32'
    header = json.dumps({'name': name, 'dtype': dtype, 'shape': list(array.shape)}, sort_keys=True)
    try:
        with open(path, 'wb') as f:
            f.write(MAGIC)
            f.write(header.encode('utf-8') + b'\n')
            f.write(np.ascontiguousarray(array, dtype=CODES[dtype]).tobytes())
    except (IOError, OSError) as e:
        raise BundleError("Could not write tensor file %s: %s" % (path, e))


def read_tensor(path):
    try:
        with open(path, 'rb') as f:
            if f.read(4) != MAGIC:
                raise BundleError("Bad magic in tensor file %s." % path)
            header = json.loads(f.readline().decode('utf-8'))
            payload = f.read()
    except (IOError, OSError) as e:
        raise BundleError("Could not read tensor file %s: %s" % (path, e))
    except (ValueError, UnicodeDecodeError):
        raise BundleError("Corrupted header in tensor file %s." % path)
    if header.get('dtype') not in CODES:
        raise BundleError("Unknown dtype %s in tensor file %s." % (header.get('dtype'), path))
    dtype = np.dtype(CODES[header['dtype']])
    shape = tuple(header['shape'])
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise BundleError("Tensor file %s holds %d bytes, header promises shape %s." % (path, len(payload), shape))
    array = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return header['name'], array.astype(dtype.newbyteorder('='))


def file_name(name):
    return name.replace('/', '__') + '.sct'


def write_bundle(directory, tensors, metadata=None):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise BundleError("Could not create bundle directory %s: %s" % (directory, e))
    entries = []
    for name, array in tensors.items():
        fname = file_name(name)
        write_tensor(os.path.join(directory, fname), name, array)
        entries.append({'name': name, 'file': fname, 'shape': list(np.shape(array))})
    manifest = {'version': 1, 'tensors': entries, 'metadata': metadata or {}}
    write_json(os.path.join(directory, MANIFEST), manifest)


def read_bundle(directory):
    manifest = read_json(os.path.join(directory, MANIFEST))
    tensors = OrderedDict()
    for entry in manifest.get('tensors', []):
        path = os.path.join(directory, entry['file'])
        name, array = read_tensor(path)
        if list(array.shape) != list(entry['shape']):
            raise BundleError("Tensor file %s has shape %s, manifest says %s." % (path, array.shape, entry['shape']))
        tensors[name] = array
    return tensors, manifest.get('metadata', {})


def write_json(path, obj):
    tmp = path + '.tmp'
    try:
        with open(tmp, 'w', encoding='utf-8') as f:
            f.write(canonical_json(obj) + '\n')
        os.replace(tmp, path)
    except (IOError, OSError) as e:
        raise BundleError("Could not write %s: %s" % (path, e))


def read_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f, object_pairs_hook=OrderedDict)
    except (IOError, OSError) as e:
        raise BundleError("Could not read %s: %s" % (path, e))
    except ValueError:
        raise BundleError("Corrupted JSON in %s." % path)
