import json
import os

import pytest

from stylecraft.cli import RUN_MANIFEST, main
from stylecraft.datagen import StyleDataset


def test_help_exits_cleanly(capsys):
    assert main(['gen-data', '--help']) == 0
    assert '--out' in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(['gen-data', '--out', 'x', '--colour', 'red']) == 1
    assert '--colour' in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(['render']) == 1
    assert 'render' in capsys.readouterr().err


def test_missing_checkpoint_is_a_usage_error(tmp_path):
    assert main(['train-adapter', '--data', str(tmp_path), '--out', str(tmp_path / 'out')]) == 1


def test_gen_data_writes_manifests(tmp_path, monkeypatch):
    monkeypatch.delenv('STYLECRAFT_SEED', raising=False)
    out = str(tmp_path / 'data')
    assert main(['gen-data', '--quiet', '--out', out, '--styles', '2', '--contents', '2', '--images', '8',
                 '--videos', '2', '--frames', '4', '--seed', '5']) == 0
    assert os.path.exists(os.path.join(out, 'manifest.json'))
    with open(os.path.join(out, RUN_MANIFEST)) as f:
        run = json.load(f)
    assert run['command'] == 'gen-data'
    assert run['seed'] == 5
    assert run['config']['data']['styles'] == 2
    assert len(StyleDataset(out).table) == 10


def test_seed_variable_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv('STYLECRAFT_SEED', '11')
    out = str(tmp_path / 'data')
    assert main(['gen-data', '--quiet', '--out', out, '--styles', '2', '--contents', '2', '--images', '4',
                 '--videos', '0', '--seed', '5']) == 0
    with open(os.path.join(out, RUN_MANIFEST)) as f:
        assert json.load(f)['seed'] == 11


def test_bad_dataset_is_a_runtime_error(tmp_path):
    assert main(['gen-data', '--quiet', '--out', str(tmp_path), '--styles', '1']) == 2


@pytest.mark.slow
def test_micro_curriculum(tmp_path):
    config = str(tmp_path / 'micro.json')
    with open(config, 'w') as f:
        json.dump({'model': {'layers': 2, 'width': 16, 'heads': 2, 'latent_channels': 4, 'patch': 8,
                             'style_queries': 4, 'encoder_layers': 1, 'qformer_blocks': 1,
                             'autoencoder_width': 8, 'frames': 4},
                   'data': {'frames': 4}}, f)
    data = str(tmp_path / 'data')
    stage = ['--quiet', '--config', config, '--data', data, '--steps', '2', '--batch-size-img', '4',
             '--batch-size-vid', '1', '--log-every', '1']
    assert main(['gen-data', '--quiet', '--config', config, '--out', data, '--styles', '2', '--contents', '2',
                 '--images', '16', '--videos', '4']) == 0
    assert main(['pretrain'] + stage + ['--autoencoder-steps', '2', '--out', str(tmp_path / 'pretrain')]) == 0
    assert main(['train-adapter'] + stage + ['--ckpt', str(tmp_path / 'pretrain'), '--out', str(tmp_path / 'adapter')]) == 0
    assert main(['finetune-temporal'] + stage + ['--ckpt', str(tmp_path / 'adapter'),
                                                 '--out', str(tmp_path / 'temporal')]) == 0
    for name in ('checkpoint.json', 'loss.csv', 'loss.svg', RUN_MANIFEST):
        assert os.path.exists(str(tmp_path / 'temporal' / name))
    image = str(tmp_path / 'sample' / 'image.png')
    assert main(['sample', '--quiet', '--config', config, '--ckpt', str(tmp_path / 'temporal'), '--style-ref', '1',
                 '--content', '4 5 7 13', '--steps', '2', '--out', image]) == 0
    assert os.path.exists(image)
    video = str(tmp_path / 'video')
    assert main(['sample', '--quiet', '--config', config, '--ckpt', str(tmp_path / 'temporal'), '--style-ref', image,
                 '--content', '4 5 7 13', '--steps', '2', '--frames', '4', '--out', video]) == 0
    assert len([f for f in os.listdir(video) if f.startswith('frame_')]) == 4
