#!/usr/bin/python3
# -*- coding: utf-8 -*-

#=====================================================================#
#
# Description:
# Full desk-scale curriculum: generate the 8-style / 16-content set,
# train the probe, pretrain the base model, then run the two-stage
# recipe with every ablation variant and print the ordering table.
#
# Usage:
# python3 curriculum.py [output directory]
#
#=====================================================================#

import logging
import os
import sys

from stylecraft import config as C
from stylecraft.datagen import StyleDataset, build_dataset, linear_style_probe
from stylecraft.probe import train_probe
from stylecraft.trainer import load_checkpoint, run_ablation_matrix, run_stage
from stylecraft.validate import (copy_reference_baseline, guidance_sweep, ordering_table, print_ordering,
                                 run_eval_suite)

logging.basicConfig(format='%(asctime)s : %(levelname)s : %(message)s', level=logging.INFO)

out = sys.argv[1] if len(sys.argv) > 1 else 'runs/curriculum'
settings = C.load_curriculum()
data, grid = settings['data'], settings['eval']

#=====================================================================#
# Data and probe
#=====================================================================#

data_dir = os.path.join(out, 'data')
if not os.path.exists(os.path.join(data_dir, 'manifest.json')):
    build_dataset(data_dir, data['styles'], data['contents'], data['images'], data['videos'], data['frames'], data['seed'],
                  held_out=data['held_out'])
dataset = StyleDataset(data_dir)
print("Linear style probe on raw pixels: %0.3f" % linear_style_probe(data['styles'], data['contents'], seed=data['seed']))

probe_settings = settings['probe']
probe = train_probe(dataset, os.path.join(out, 'probe'), probe_settings['steps'], probe_settings['batch_size'],
                    probe_settings['lr'], probe_settings['seed'])
probe.print_accuracy()
probe.require_gate()

#=====================================================================#
# Training
#=====================================================================#

base_model = C.model_config(settings)
pretrained = os.path.join(out, 'pretrain')
run_stage(C.stage_config(settings, 'pretrain'), dataset, out=pretrained, model_config=base_model)
runs = run_ablation_matrix(dataset, pretrained, os.path.join(out, 'ablate'), base_model,
                           C.stage_config(settings, 'adapter'), C.stage_config(settings, 'temporal'),
                           C.stage_config(settings, 'joint'))

#=====================================================================#
# Evaluation
#=====================================================================#

eval_grid = {'styles': grid['styles'], 'refs_per_style': grid['refs_per_style'],
             'steps': grid['sample_steps'], 'seed': grid['seed'], 'held_out': dataset.held_out}
images, videos = {}, {}
for run_id, directory in runs.items():
    model = load_checkpoint(directory)
    images[run_id] = run_eval_suite(model, probe, os.path.join(out, 'eval', run_id, 'image'),
                                    C.guidance_config(settings), contents=grid['contents'], run_id=run_id, **eval_grid)
    images[run_id].print_accuracy()
    if run_id in ('full', 'adapter_only', 'joint'):
        videos[run_id] = run_eval_suite(model, probe, os.path.join(out, 'eval', run_id, 'video'),
                                        C.guidance_config(settings, video=True), video=True,
                                        contents=grid['contents'], run_id=run_id, **eval_grid)
        videos[run_id].print_accuracy()

full = load_checkpoint(runs['full'])
images['full_multi'] = run_eval_suite(full, probe, os.path.join(out, 'eval', 'full_multi'), C.guidance_config(settings),
                                      references=3, contents=grid['contents'], run_id='full_multi', **eval_grid)

# Base model, text only: style accuracy should sit near chance.
base = run_eval_suite(load_checkpoint(pretrained), probe, os.path.join(out, 'eval', 'base'),
                      C.GuidanceConfig(lambda_s=0.0), contents=grid['contents'], run_id='base', **eval_grid)
base.print_accuracy()
copy_reference_baseline(probe, grid['styles'], grid['contents'], grid['refs_per_style'], grid['seed'],
                        held_out=dataset.held_out).print_accuracy()

sweep = guidance_sweep(full, probe, contents=grid['contents'], **eval_grid)
sweep.to_csv(os.path.join(out, 'eval', 'guidance_sweep.csv'), index=False, float_format='%.6f')
print(sweep)

table = ordering_table(images, videos, os.path.join(out, 'ablation.csv'))
print_ordering(table)
