#!/bin/python

import os

import pytest

import gfuzz
import mock_executor
from gfuzz.config import CampaignConfig
from gfuzz.distance import TargetSite
from gfuzz.fuzz_engine import plan_campaign

DIR_PATH = os.path.dirname(os.path.realpath(__file__))


@pytest.fixture()
def sample_path():
    def path(name):
        return os.path.join(DIR_PATH, name)
    yield path


@pytest.fixture()
def program(sample_path):
    yield gfuzz.load_program(sample_path("sample.graph.json"))


@pytest.fixture()
def kb():
    yield gfuzz.load_knowledge_base()


@pytest.fixture()
def pipefs():
    yield gfuzz.load_scenario("pipefs")


@pytest.fixture()
def statfs_decoy():
    yield gfuzz.load_scenario("statfs_decoy")


@pytest.fixture()
def mock_campaign(pipefs, kb):
    # The executor is canned, so the scenario only supplies the syscall table
    target = TargetSite(pipefs.default_target())
    dm, inferred = plan_campaign(pipefs, target, CampaignConfig(), kb)
    c = gfuzz.Campaign(pipefs, target, dm, inferred, CampaignConfig())
    c.inject_executor(mock_executor.Executor(hit_after=20))
    yield c
